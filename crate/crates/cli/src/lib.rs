//! Command-line surface: problem validation, sweeps, bound decomposition,
//! the lower-bound experiment, negative-moment checks, and rendering of
//! persisted runs as aligned tables or log-log SVG plots.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use snfl_core::experiment::{
    additive_sweep, bound_sweep, lower_bound_experiment, outcome_rate_fits, persist_run, sweep,
    ExperimentError, SweepPlan,
};
use snfl_core::functionals::volterra_negative_moment_check;
use snfl_core::noise::NoiseStream;
use snfl_core::problem::{builtin, load_problem, validate, Problem, BUILTIN_NAMES};

#[derive(Parser)]
#[command(
    name = "snfl",
    about = "Small-noise SDE fluctuation laboratory",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a problem against the model assumption screens
    Validate {
        #[command(flatten)]
        prob: ProblemArgs,
        /// Sample-grid density per axis for the screens
        #[arg(long, default_value_t = 32)]
        density: usize,
    },
    /// Distance sweep of the rescaled state fluctuation over an eps grid
    Sweep(SweepArgs),
    /// Sweep plus the decomposed information bound at every eps
    Bound(SweepArgs),
    /// Same pipeline for the rescaled additive observable
    Additive(SweepArgs),
    /// Limit-pair estimate of the Fisher/eps^2 lower bound
    Lower {
        #[command(flatten)]
        prob: ProblemArgs,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long, default_value_t = 20_000)]
        paths: usize,
        #[arg(long, default_value_t = 128)]
        mesh: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output root for run directories
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Negative-moment decay of the diffusion energy across horizons
    Volterra {
        #[command(flatten)]
        prob: ProblemArgs,
        /// Moment exponent p0 (estimates the -p0 and -3 p0 decays)
        #[arg(long, default_value_t = 2.0)]
        p0: f64,
        /// Comma-separated horizons
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0")]
        t: Vec<f64>,
        #[arg(long, default_value_t = 0.2)]
        eps: f64,
        #[arg(long, default_value_t = 20_000)]
        paths: usize,
        #[arg(long, default_value_t = 128)]
        mesh: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output root for run directories
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Render the report table for a persisted run directory
    Report {
        /// Run directory written by sweep/bound/additive
        run: PathBuf,
    },
    /// Log-log SVG plot of one fitted quantity from a run directory
    Plot {
        /// Run directory written by sweep/bound/additive
        run: PathBuf,
        /// Quantity to plot: fisher, kolmogorov, abs_mean, var_gap
        #[arg(long, default_value = "fisher")]
        what: String,
        /// Output SVG path (defaults to <run>/<what>.svg)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ProblemArgs {
    /// Built-in problem name; unique prefixes are accepted
    #[arg(long)]
    problem: Option<String>,
    /// JSON file defining a custom problem
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Plan file (JSON); inline flags override its fields
    plan: Option<PathBuf>,
    #[command(flatten)]
    prob: ProblemArgs,
    /// Evaluation horizon
    #[arg(long)]
    t: Option<f64>,
    /// Comma-separated eps grid, strictly decreasing
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    /// Evaluation paths per grid point
    #[arg(long)]
    paths: Option<usize>,
    /// Euler intervals (even)
    #[arg(long)]
    mesh: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Paths for the conditional-projection tables
    #[arg(long)]
    proj_paths: Option<usize>,
    /// Target bin count for the projection tables
    #[arg(long)]
    proj_bins: Option<usize>,
    /// Output root for run directories
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> CliError {
        match e {
            ExperimentError::BadPlan(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

/// Parses argv and dispatches; returns the process exit code
/// (0 success, 1 usage error, 2 runtime failure).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("usage: snfl <verb> [options]; see snfl --help");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Validate { prob, density } => cmd_validate(&prob, density),
        Cmd::Sweep(args) => cmd_sweep(args, SweepMode::State),
        Cmd::Bound(args) => cmd_sweep(args, SweepMode::StateWithBound),
        Cmd::Additive(args) => cmd_sweep(args, SweepMode::Additive),
        Cmd::Lower {
            prob,
            t,
            paths,
            mesh,
            seed,
            out,
        } => cmd_lower(&prob, t, paths, mesh, seed, &out),
        Cmd::Volterra {
            prob,
            p0,
            t,
            eps,
            paths,
            mesh,
            seed,
            out,
        } => cmd_volterra(&prob, p0, &t, eps, paths, mesh, seed, &out),
        Cmd::Report { run } => {
            print!("{}", render_report(&run)?);
            Ok(())
        }
        Cmd::Plot { run, what, out } => cmd_plot(&run, &what, out.as_deref()),
    }
}

/// Resolves --problem (exact name, then unique prefix) or --config.
fn resolve_problem(args: &ProblemArgs) -> Result<Problem, CliError> {
    match (&args.problem, &args.config) {
        (Some(_), Some(_)) => Err(CliError::Usage(
            "give either --problem or --config, not both".into(),
        )),
        (None, None) => Err(CliError::Usage(format!(
            "a problem is required: --problem <name> or --config <file>; built-ins: {}",
            BUILTIN_NAMES.join(", ")
        ))),
        (Some(name), None) => resolve_builtin(name),
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            load_problem(&text).map_err(|e| CliError::Usage(e.to_string()))
        }
    }
}

fn resolve_builtin(name: &str) -> Result<Problem, CliError> {
    let full = if BUILTIN_NAMES.contains(&name) {
        name.to_string()
    } else {
        let matches: Vec<&str> = BUILTIN_NAMES
            .iter()
            .copied()
            .filter(|b| b.starts_with(name))
            .collect();
        match matches.as_slice() {
            [one] => one.to_string(),
            [] => {
                return Err(CliError::Usage(format!(
                    "unknown problem {name:?}; built-ins: {}",
                    BUILTIN_NAMES.join(", ")
                )))
            }
            many => {
                return Err(CliError::Usage(format!(
                    "problem {name:?} is ambiguous: {}",
                    many.join(", ")
                )))
            }
        }
    };
    builtin(&full).map_err(|e| CliError::Usage(e.to_string()))
}

fn cmd_validate(prob: &ProblemArgs, density: usize) -> Result<(), CliError> {
    let p = resolve_problem(prob)?;
    let report = validate(&p, density).map_err(|e| CliError::Usage(e.to_string()))?;
    print!("{report}");
    if report.all_pass() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "problem {} fails the validation screens",
            p.label()
        )))
    }
}

#[derive(Clone, Copy, PartialEq)]
enum SweepMode {
    State,
    StateWithBound,
    Additive,
}

/// Builds the plan from an optional plan file plus flag overrides; the
/// fully resolved plan is what gets persisted with the run.
fn resolve_plan(args: &SweepArgs) -> Result<(Problem, SweepPlan), CliError> {
    let mut plan = match &args.plan {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<SweepPlan>(&text)
                .map_err(|e| CliError::Usage(format!("bad plan file {}: {e}", path.display())))?
        }
        None => SweepPlan::new("", 1),
    };
    if let Some(t) = args.t {
        plan.t = t;
    }
    if let Some(eps) = &args.eps {
        plan.eps = eps.clone();
    }
    if let Some(paths) = args.paths {
        plan.paths = paths;
    }
    if let Some(mesh) = args.mesh {
        plan.mesh = mesh;
    }
    if let Some(seed) = args.seed {
        plan.seed = seed;
    }
    if let Some(pp) = args.proj_paths {
        plan.proj_paths = pp;
    }
    if let Some(pb) = args.proj_bins {
        plan.proj_bins = pb;
    }
    let problem = if args.prob.problem.is_some() || args.prob.config.is_some() {
        resolve_problem(&args.prob)?
    } else if !plan.problem.is_empty() {
        resolve_builtin(&plan.problem)?
    } else {
        return Err(CliError::Usage(format!(
            "a problem is required: --problem <name>, --config <file>, or a plan file; built-ins: {}",
            BUILTIN_NAMES.join(", ")
        )));
    };
    plan.problem = problem.label().to_string();
    plan.check().map_err(CliError::from)?;
    Ok((problem, plan))
}

fn cmd_sweep(args: SweepArgs, mode: SweepMode) -> Result<(), CliError> {
    let (problem, plan) = resolve_plan(&args)?;
    let outcome = match mode {
        SweepMode::Additive => additive_sweep(&problem, &plan)?,
        _ => sweep(&problem, &plan)?,
    };
    let fits = outcome_rate_fits(&outcome);
    let bounds = if mode == SweepMode::StateWithBound {
        bound_sweep(&problem, &plan)?
    } else {
        Vec::new()
    };
    fs::create_dir_all(&args.out)?;
    let dir = persist_run(&args.out, &outcome, &fits, &bounds)?;
    println!("run directory: {}", dir.display());
    print!("{}", render_report(&dir)?);
    Ok(())
}

fn cmd_lower(
    prob: &ProblemArgs,
    t: f64,
    paths: usize,
    mesh: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let p = resolve_problem(prob)?;
    let lb = lower_bound_experiment(&p, t, paths, mesh, seed)?;
    let dir = fresh_run_dir(out, p.label())?;
    let meta = serde_json::json!({
        "experiment": "lower",
        "problem": p.label(),
        "t": t,
        "paths": paths,
        "mesh": mesh,
        "seed": seed,
    });
    fs::write(dir.join("meta.json"), pretty(&meta))?;
    fs::write(
        dir.join("lower.json"),
        pretty(&serde_json::to_value(&lb).map_err(|e| CliError::Runtime(e.to_string()))?),
    )?;
    println!("run directory: {}", dir.display());
    println!("problem {}  t={t}  {paths} paths  mesh {mesh}  seed {seed}", p.label());
    println!("  limit variance      {:.6}", lb.beta2);
    println!(
        "  E|m(U)|             {:.6e} ± {:.1e}",
        lb.mean_abs_regression, lb.mean_abs_se
    );
    println!(
        "  lower estimate      {:.6e} ± {:.1e}",
        lb.lower, lb.lower_se
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_volterra(
    prob: &ProblemArgs,
    p0: f64,
    t_list: &[f64],
    eps: f64,
    paths: usize,
    mesh: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let p = resolve_problem(prob)?;
    let ns = NoiseStream::new(seed);
    let check = volterra_negative_moment_check(&p, eps, p0, t_list, paths, mesh, &ns)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let dir = fresh_run_dir(out, p.label())?;
    let meta = serde_json::json!({
        "experiment": "volterra",
        "problem": p.label(),
        "p0": p0,
        "t": t_list,
        "eps": eps,
        "paths": paths,
        "mesh": mesh,
        "seed": seed,
    });
    fs::write(dir.join("meta.json"), pretty(&meta))?;
    let mut csv = String::from("#schema=volterra-v1\nt,plain,plain_se,quadratic,quadratic_se\n");
    for row in &check.rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.t, row.plain, row.plain_se, row.quadratic, row.quadratic_se
        ));
    }
    fs::write(dir.join("volterra.csv"), csv)?;
    println!("run directory: {}", dir.display());
    println!(
        "problem {}  p0={p0}  eps={eps}  {paths} paths  mesh {mesh}  seed {seed}",
        p.label()
    );
    println!("  {:<8} {:<24} {:<24}", "t", "flat kernel", "squared-lag kernel");
    for row in &check.rows {
        println!(
            "  {:<8} {:<24} {:<24}",
            trim_float(row.t),
            format!("{:.6e} ± {:.1e}", row.plain, row.plain_se),
            format!("{:.6e} ± {:.1e}", row.quadratic, row.quadratic_se),
        );
    }
    println!(
        "  slopes: flat {:.4} (expect {:.4}), squared-lag {:.4} (expect {:.4})",
        check.slope_plain,
        -p0,
        check.slope_quadratic,
        -3.0 * p0
    );
    Ok(())
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value renders")
}

/// runs/<unix-seconds>-<label>[-k]; mirrors the sweep persistence naming.
fn fresh_run_dir(root: &Path, label: &str) -> Result<PathBuf, CliError> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .expect("clock after epoch")
        .as_secs();
    let safe: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    let mut dir = root.join(format!("{secs}-{safe}"));
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{secs}-{safe}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

struct Csv {
    cols: HashMap<String, usize>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn get<'a>(&'a self, row: &'a [String], name: &str) -> Result<&'a str, CliError> {
        let idx = *self
            .cols
            .get(name)
            .ok_or_else(|| CliError::Runtime(format!("missing column {name}")))?;
        row.get(idx)
            .map(|s| s.as_str())
            .ok_or_else(|| CliError::Runtime(format!("short row at column {name}")))
    }

    fn num(&self, row: &[String], name: &str) -> Result<f64, CliError> {
        let s = self.get(row, name)?;
        s.parse::<f64>()
            .map_err(|_| CliError::Runtime(format!("bad number {s:?} in column {name}")))
    }
}

fn read_csv(path: &Path) -> Result<Csv, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(first) if first.starts_with("#schema=") => {}
        _ => {
            return Err(CliError::Runtime(format!(
                "{}: missing #schema header",
                path.display()
            )))
        }
    }
    let header = lines
        .next()
        .ok_or_else(|| CliError::Runtime(format!("{}: missing column header", path.display())))?;
    let cols = header
        .split(',')
        .enumerate()
        .map(|(i, name)| (name.to_string(), i))
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok(Csv { cols, rows })
}

/// Aligned table for a persisted run: per-eps distances, the Pinsker
/// verdict, rate-fit footer, and bound components when present. Output
/// is a pure function of the directory contents.
pub fn render_report(run: &Path) -> Result<String, RenderError> {
    render_report_inner(run).map_err(|e| match e {
        CliError::Usage(m) | CliError::Runtime(m) => RenderError(m),
    })
}

/// Error rendering a run directory (missing or malformed files).
#[derive(Debug)]
pub struct RenderError(pub String);

impl std::fmt::Display for RenderError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for RenderError {}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> CliError {
        CliError::Runtime(e.0)
    }
}

fn render_report_inner(run: &Path) -> Result<String, CliError> {
    let meta_text = fs::read_to_string(run.join("meta.json"))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", run.join("meta.json").display())))?;
    let meta: serde_json::Value = serde_json::from_str(&meta_text)
        .map_err(|e| CliError::Runtime(format!("bad meta.json: {e}")))?;
    let reports = read_csv(&run.join("reports.csv"))?;
    let fits = read_csv(&run.join("ratefits.csv"))?;

    let mut out = String::new();
    out.push_str(&format!(
        "problem {} [{}]  t={} mesh={} paths={} seed={}\n\n",
        meta["problem"].as_str().unwrap_or("?"),
        meta["kind"].as_str().unwrap_or("?"),
        meta["t"],
        meta["mesh"],
        meta["paths"],
        meta["seed"],
    ));
    out.push_str(&format!(
        "{:<10} {:<24} {:<24} {}\n",
        "eps", "fisher", "kolmogorov", "pinsker"
    ));
    for row in &reports.rows {
        let eps = reports.num(row, "eps")?;
        let fisher = reports.num(row, "fisher")?;
        let se = reports.num(row, "fisher_se")?;
        let floor = reports.num(row, "fisher_floor")?;
        let kol = reports.num(row, "kolmogorov")?;
        let band = reports.num(row, "kolmogorov_band")?;
        let pass = reports.get(row, "pinsker_pass")? == "true";
        let eff = se.max(floor);
        let fisher_cell = if fisher < eff {
            format!("≤ {eff:.1e}")
        } else {
            format!("{fisher:.4e} ± {eff:.1e}")
        };
        out.push_str(&format!(
            "{:<10} {:<24} {:<24} {}\n",
            trim_float(eps),
            fisher_cell,
            format!("{kol:.4e} ± {band:.1e}"),
            if pass { "pass" } else { "FAIL" },
        ));
    }

    out.push_str("\nrate fits\n");
    let mut seen: Vec<String> = Vec::new();
    for row in &fits.rows {
        let q = fits.get(row, "quantity")?.to_string();
        if seen.contains(&q) {
            continue;
        }
        seen.push(q.clone());
        let note = fits.get(row, "note")?;
        if !note.is_empty() {
            out.push_str(&format!("{q:<12} {note}\n"));
            continue;
        }
        let slope = fits.num(row, "slope")?;
        let slope_se = fits.num(row, "slope_se")?;
        let r2 = fits.num(row, "r2")?;
        let total = fits
            .rows
            .iter()
            .filter(|r| fits.get(r, "quantity").map(|v| v == q).unwrap_or(false))
            .count();
        let used = fits
            .rows
            .iter()
            .filter(|r| {
                fits.get(r, "quantity").map(|v| v == q).unwrap_or(false)
                    && fits.get(r, "excluded").map(|v| v == "false").unwrap_or(false)
            })
            .count();
        out.push_str(&format!(
            "{q:<12} slope {slope:.3} ± {slope_se:.3}   r2 {r2:.4}   points {used}/{total}\n"
        ));
    }

    let bounds_path = run.join("bound_components.csv");
    if bounds_path.exists() {
        let bounds = read_csv(&bounds_path)?;
        if !bounds.rows.is_empty() {
            out.push_str(&format!(
                "\nbound components\n{:<10} {:<13} {:<13} {:<13} {:<13} {}\n",
                "eps", "mean term", "var term", "grad term", "assembled", "fisher/bound"
            ));
            for row in &bounds.rows {
                let eps = bounds.num(row, "eps")?;
                let tm = bounds.num(row, "term_mean")?;
                let tv = bounds.num(row, "term_var")?;
                let tg = bounds.num(row, "term_grad")?;
                let bound = bounds.num(row, "bound")?;
                let fisher = bounds.num(row, "fisher")?;
                let ok = bounds.get(row, "shape_ok")? == "true";
                out.push_str(&format!(
                    "{:<10} {:<13} {:<13} {:<13} {:<13} {:.2}{}\n",
                    trim_float(eps),
                    format!("{tm:.3e}"),
                    format!("{tv:.3e}"),
                    format!("{tg:.3e}"),
                    format!("{bound:.3e}"),
                    fisher / bound,
                    if ok { "" } else { "  (outside shape envelope)" },
                ));
            }
        }
    }
    Ok(out)
}

/// Short decimal for axis labels and eps columns: trailing zeros cut.
fn trim_float(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

fn cmd_plot(run: &Path, what: &str, out: Option<&Path>) -> Result<(), CliError> {
    let fits = read_csv(&run.join("ratefits.csv"))?;
    let mut points: Vec<(f64, f64, bool)> = Vec::new();
    let mut fit: Option<(f64, f64, f64)> = None;
    let mut note = String::new();
    let mut quantities: Vec<String> = Vec::new();
    for row in &fits.rows {
        let q = fits.get(row, "quantity")?;
        if !quantities.iter().any(|s| s == q) {
            quantities.push(q.to_string());
        }
        if q != what {
            continue;
        }
        let n = fits.get(row, "note")?;
        if !n.is_empty() {
            note = n.to_string();
            continue;
        }
        points.push((
            fits.num(row, "eps")?,
            fits.num(row, "value")?,
            fits.get(row, "excluded")? == "true",
        ));
        if fit.is_none() {
            fit = Some((
                fits.num(row, "slope")?,
                fits.num(row, "intercept")?,
                fits.num(row, "slope_se")?,
            ));
        }
    }
    if points.is_empty() && note.is_empty() {
        return Err(CliError::Runtime(format!(
            "no fit rows for {what:?}; quantities in this run: {}",
            quantities.join(", ")
        )));
    }
    if fit.is_none() {
        return Err(CliError::Runtime(format!("cannot plot {what:?}: {note}")));
    }
    let (slope, intercept, slope_se) = fit.unwrap();
    let svg = render_loglog_svg(what, &points, slope, intercept, slope_se);
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join(format!("{what}.svg")));
    fs::write(&path, svg)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Standalone log-log scatter with the fitted power law and its slope
/// annotation; no external renderer needed.
fn render_loglog_svg(
    what: &str,
    points: &[(f64, f64, bool)],
    slope: f64,
    intercept: f64,
    slope_se: f64,
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const ML: f64 = 78.0;
    const MR: f64 = 24.0;
    const MT: f64 = 46.0;
    const MB: f64 = 56.0;
    let plotted: Vec<(f64, f64, bool)> = points
        .iter()
        .copied()
        .filter(|&(e, v, _)| e > 0.0 && v > 0.0)
        .collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(e, v, _) in &plotted {
        x0 = x0.min(e.log10());
        x1 = x1.max(e.log10());
        y0 = y0.min(v.log10());
        y1 = y1.max(v.log10());
    }
    if !x0.is_finite() {
        x0 = -1.0;
        x1 = 0.0;
        y0 = -1.0;
        y1 = 0.0;
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        let span = (*hi - *lo).max(1e-9);
        *lo -= 0.06 * span;
        *hi += 0.06 * span;
    };
    pad(&mut x0, &mut x1);
    pad(&mut y0, &mut y1);
    let px = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"13\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));
    s.push_str(&format!(
        "<text x=\"{ML}\" y=\"{}\">{} vs eps (log-log)</text>\n",
        MT - 16.0,
        what
    ));
    // axis ticks at the quarter points, labeled in original units
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        s.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#444\"/>\n",
            px(fx),
            H - MB,
            H - MB + 5.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            px(fx),
            H - MB + 20.0,
            sig_label(10f64.powf(fx))
        ));
        s.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{2}\" x2=\"{1}\" y2=\"{2}\" stroke=\"#444\"/>\n",
            ML - 5.0,
            ML,
            py(fy)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            ML - 9.0,
            py(fy) + 4.0,
            sig_label(10f64.powf(fy))
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">eps</text>\n",
        (ML + W - MR) / 2.0,
        H - 14.0
    ));
    // fit line in data space: ln v = slope ln e + intercept
    let line_y = |lx: f64| (slope * lx * std::f64::consts::LN_10 + intercept) / std::f64::consts::LN_10;
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#c44\" stroke-width=\"1.5\"/>\n",
        px(x0),
        py(line_y(x0)),
        px(x1),
        py(line_y(x1))
    ));
    for &(e, v, excluded) in &plotted {
        let (cx, cy) = (px(e.log10()), py(v.log10()));
        if excluded {
            s.push_str(&format!(
                "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"4\" fill=\"none\" stroke=\"#999\"/>\n"
            ));
        } else {
            s.push_str(&format!(
                "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"4\" fill=\"#2f6f9f\"/>\n"
            ));
        }
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\">slope {:.9} ± {:.3}</text>\n",
        ML + 12.0,
        MT + 22.0,
        slope,
        slope_se
    ));
    s.push_str("</svg>\n");
    s
}

fn sig_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        trim_float(v)
    } else {
        format!("{v:.2e}")
    }
}
