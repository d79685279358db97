//! End-to-end tests against the built binary: exit codes, persisted
//! artifacts, rendering determinism, and the plot/fit agreement contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn snfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snfl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Extracts the run directory announced on stdout.
fn run_dir(out: &Output) -> PathBuf {
    let text = stdout(out);
    let line = text
        .lines()
        .find(|l| l.starts_with("run directory: "))
        .unwrap_or_else(|| panic!("no run directory line in:\n{text}"));
    PathBuf::from(line.trim_start_matches("run directory: "))
}

fn small_p1_sweep(out_dir: &Path, seed: &str) -> Output {
    snfl(&[
        "sweep",
        "--problem",
        "P1",
        "--eps",
        "0.2,0.1",
        "--paths",
        "1500",
        "--mesh",
        "32",
        "--proj-paths",
        "800",
        "--proj-bins",
        "16",
        "--seed",
        seed,
        "--out",
        out_dir.to_str().unwrap(),
    ])
}

#[test]
fn sweep_smoke_writes_reports_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = small_p1_sweep(tmp.path(), "7");
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let dir = run_dir(&out);
    for name in ["plan.json", "reports.csv", "ratefits.csv", "meta.json"] {
        assert!(dir.join(name).exists(), "missing {name}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["plan"]["seed"], 7);
    assert_eq!(meta["plan"]["proj_paths"], 800);
}

#[test]
fn unknown_problem_is_usage_error_listing_builtins() {
    let out = snfl(&["sweep", "--problem", "NOPE"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("P0_pure_noise"), "stderr: {err}");
    assert!(err.contains("P3_cos_diffusion"), "stderr: {err}");
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = snfl(&["sweep", "--problem", "P1", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--bogus"));
}

#[test]
fn report_is_deterministic_and_bounds_null_fisher_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_dir(&small_p1_sweep(tmp.path(), "3"));
    let r1 = snfl(&["report", dir.to_str().unwrap()]);
    let r2 = snfl(&["report", dir.to_str().unwrap()]);
    assert!(r1.status.success());
    assert_eq!(stdout(&r1), stdout(&r2));
    let text = stdout(&r1);
    let fisher_cells: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("0."))
        .map(|l| l.split_whitespace().nth(1).unwrap())
        .collect();
    assert_eq!(fisher_cells.len(), 2);
    for cell in fisher_cells {
        assert_eq!(cell, "≤", "expected bounded rendering, got {cell}");
    }
}

#[test]
fn report_on_missing_dir_is_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = snfl(&["report", tmp.path().join("absent").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plot_slope_matches_persisted_fit_and_footer_is_quadratic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = snfl(&[
        "sweep",
        "--problem",
        "P2",
        "--eps",
        "0.4,0.283,0.2,0.141",
        "--paths",
        "20000",
        "--mesh",
        "32",
        "--seed",
        "11",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let dir = run_dir(&out);

    let report = stdout(&snfl(&["report", dir.to_str().unwrap()]));
    let footer = report
        .lines()
        .find(|l| l.starts_with("fisher"))
        .expect("fisher footer line");
    let slope_txt = footer.split_whitespace().nth(2).unwrap();
    let footer_slope: f64 = slope_txt.parse().unwrap();
    assert!(
        (1.5..=2.5).contains(&footer_slope),
        "footer slope {footer_slope}"
    );

    let plot = snfl(&["plot", dir.to_str().unwrap(), "--what", "fisher"]);
    assert!(plot.status.success(), "stderr: {}", stderr(&plot));
    let svg = std::fs::read_to_string(dir.join("fisher.svg")).unwrap();
    let annotated: f64 = svg
        .split("slope ")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    let csv = std::fs::read_to_string(dir.join("ratefits.csv")).unwrap();
    let fit_row = csv
        .lines()
        .find(|l| l.starts_with("fisher,"))
        .expect("fisher row");
    let csv_slope: f64 = fit_row.split(',').nth(6).unwrap().parse().unwrap();
    assert!(
        (annotated - csv_slope).abs() < 1e-9,
        "svg {annotated} vs csv {csv_slope}"
    );
    assert!(svg.contains("<circle"));
}

#[test]
fn plan_file_loads_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let plan_path = tmp.path().join("plan.json");
    std::fs::write(
        &plan_path,
        r#"{"problem":"P1_ou","t":1.0,"eps":[0.2,0.1],"paths":1500,"mesh":32,
            "seed":3,"proj_paths":800,"proj_bins":16}"#,
    )
    .unwrap();
    let out = snfl(&[
        "sweep",
        plan_path.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let plan: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_dir(&out).join("plan.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(plan["seed"], 9, "flag should override the plan file");
    assert_eq!(plan["paths"], 1500, "untouched fields come from the file");
}

#[test]
fn validate_accepts_unique_prefix() {
    let out = snfl(&["validate", "--problem", "P1"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("P1_ou"));
}

#[test]
fn additive_without_observable_is_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = snfl(&[
        "additive",
        "--problem",
        "P3",
        "--eps",
        "0.2,0.1",
        "--paths",
        "1200",
        "--mesh",
        "32",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("observable"));
}

#[test]
fn volterra_on_pure_noise_recovers_exact_slopes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = snfl(&[
        "volterra",
        "--problem",
        "P0",
        "--p0",
        "2",
        "--t",
        "0.5,1.0",
        "--paths",
        "2000",
        "--mesh",
        "32",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("flat -2.0000"), "stdout: {text}");
    assert!(text.contains("squared-lag -6.0000"), "stdout: {text}");
    assert!(run_dir(&out).join("volterra.csv").exists());
}

#[test]
fn lower_run_persists_result_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = snfl(&[
        "lower",
        "--problem",
        "P2",
        "--paths",
        "2000",
        "--mesh",
        "32",
        "--seed",
        "5",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let lb: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_dir(&out).join("lower.json")).unwrap(),
    )
    .unwrap();
    assert!(lb["lower"].as_f64().unwrap() > 0.0);
}
