//! Sweep orchestration: eps grids with common random numbers, score and
//! distance estimation per grid point, log-log rate fits with a noise
//! floor, the decomposed information bound, the limit-pair lower bound,
//! and on-disk persistence of every run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::{
    build_report, fisher_distance, pinsker_check, quantile_knots, score_by_kde,
    score_by_regression, DistanceError, DistanceReport, ScoreMethod,
};
use crate::functionals::{
    additive_fields, build_projection_set, gradient_supported, negative_moment,
    observable_baseline, state_sample, FunctionalError, MalliavinSample,
};
use crate::noise::NoiseStream;
use crate::paths::{
    drift_baseline, euler_fluctuation_variance, limit_coeffs, simulate_limit_pair, simulate_sde,
    skorokhod_functional, PathError,
};
use crate::problem::{validate, Problem, ProblemError};
use crate::quad::{self, QuadError};
use crate::skeleton::{beta_variance, gamma_variance, solve_skeleton, SkeletonError};
use crate::stats::{
    fit_line, mean_and_se, nw_regress_sorted, silverman_bandwidth, variance_and_se, StatsError,
};

/// Substream tags separating the projection and evaluation ensembles of
/// a sweep. Reusing the same tags at every eps gives the
/// common-random-number coupling that steadies the slope fits.
const PROJ_TAG: u64 = 1;
const EVAL_TAG: u64 = 2;
const LOWER_TAG: u64 = 0x10e7;

/// Quantile of chi-squared(1) covering |z| <= 4 of the sample-mean term
/// in the estimator's null distribution (see `estimator_floor`).
const MEAN_TERM_Q: f64 = 16.0;

/// Default geometric eps grid, two points per octave.
pub const DEFAULT_EPS_GRID: [f64; 7] = [0.4, 0.283, 0.2, 0.141, 0.1, 0.0707, 0.05];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid sweep plan: {0}")]
    BadPlan(String),
    #[error("problem {0} fails the validation screens")]
    FailsValidation(String),
    #[error("insufficient signal: only {usable} of {total} points rise above the noise floor")]
    InsufficientSignal { usable: usize, total: usize },
    #[error("worker pool construction failed: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Everything one sweep needs: the grid, ensemble sizes, mesh, seed,
/// and the projection-estimator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub problem: String,
    pub t: f64,
    pub eps: Vec<f64>,
    pub paths: usize,
    pub mesh: usize,
    pub seed: u64,
    #[serde(default = "default_proj_paths")]
    pub proj_paths: usize,
    #[serde(default = "default_proj_bins")]
    pub proj_bins: usize,
}

fn default_proj_paths() -> usize {
    10_000
}

fn default_proj_bins() -> usize {
    64
}

impl SweepPlan {
    pub fn new(problem: &str, seed: u64) -> SweepPlan {
        SweepPlan {
            problem: problem.to_string(),
            t: 1.0,
            eps: DEFAULT_EPS_GRID.to_vec(),
            paths: 20_000,
            mesh: 128,
            seed,
            proj_paths: default_proj_paths(),
            proj_bins: default_proj_bins(),
        }
    }

    pub fn check(&self) -> Result<(), ExperimentError> {
        if self.eps.is_empty() {
            return Err(ExperimentError::BadPlan("empty eps grid".into()));
        }
        if self.eps.iter().any(|&e| !(0.0..1.0).contains(&e) || e == 0.0) {
            return Err(ExperimentError::BadPlan(
                "eps values must lie strictly inside (0, 1)".into(),
            ));
        }
        if self.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(ExperimentError::BadPlan(
                "eps values must be strictly decreasing".into(),
            ));
        }
        if self.paths < 1000 {
            return Err(ExperimentError::BadPlan(format!(
                "need at least 1000 paths per point, got {}",
                self.paths
            )));
        }
        if self.mesh < 2 || self.mesh % 2 != 0 {
            return Err(ExperimentError::BadPlan(format!(
                "mesh must be a positive even interval count, got {}",
                self.mesh
            )));
        }
        if !self.t.is_finite() || self.t <= 0.0 {
            return Err(ExperimentError::BadPlan(format!(
                "evaluation time must be positive, got {}",
                self.t
            )));
        }
        if self.proj_paths == 0 || self.proj_bins == 0 {
            return Err(ExperimentError::BadPlan(
                "projection ensemble and bin count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which rescaled functional a sweep targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FunctionalKind {
    State,
    Additive,
}

impl FunctionalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FunctionalKind::State => "state",
            FunctionalKind::Additive => "additive",
        }
    }
}

/// One grid point: the distance report plus the first two moments of
/// the rescaled functional and the estimator's own null floor.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub report: DistanceReport,
    /// Fisher value the same estimator produces on a true Gaussian of
    /// the target moments; estimates below ~this are table noise.
    pub fisher_floor: f64,
    pub mean_f: f64,
    pub mean_f_se: f64,
    pub var_f: f64,
    pub var_f_se: f64,
    /// Paired estimate of Var F minus the mesh-limit variance: the
    /// linearized fluctuation chain G runs on the same increments as
    /// each path, so var(F) - var(G) has O(eps) noise instead of O(1).
    pub var_gap: f64,
    pub var_gap_se: f64,
    pub pinsker_pass: bool,
    pub pinsker_slack: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepFailure {
    pub eps: f64,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub plan: SweepPlan,
    pub kind: FunctionalKind,
    pub target_mu: f64,
    pub target_var: f64,
    /// Variance of the discretized chain at eps -> 0 on the same mesh;
    /// the centering that keeps the variance-gap slope free of an
    /// eps-independent discretization offset.
    pub mesh_var: f64,
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

fn thread_pool() -> Result<rayon::ThreadPool, ExperimentError> {
    let workers = std::env::var("SNFL_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))
}

/// Distance sweep for the rescaled state fluctuation against its
/// Gaussian limit N(0, beta_t^2).
pub fn sweep(p: &Problem, plan: &SweepPlan) -> Result<SweepOutcome, ExperimentError> {
    run_sweep(p, plan, FunctionalKind::State)
}

/// Same pipeline for the rescaled additive observable against
/// N(0, gamma_t^2).
pub fn additive_sweep(p: &Problem, plan: &SweepPlan) -> Result<SweepOutcome, ExperimentError> {
    run_sweep(p, plan, FunctionalKind::Additive)
}

fn run_sweep(
    p: &Problem,
    plan: &SweepPlan,
    kind: FunctionalKind,
) -> Result<SweepOutcome, ExperimentError> {
    plan.check()?;
    if !validate(p, 32)?.all_pass() {
        return Err(ExperimentError::FailsValidation(p.label().to_string()));
    }
    if kind == FunctionalKind::Additive && !p.has_observable() {
        return Err(FunctionalError::MissingObservable.into());
    }
    let pt = p.clone().with_horizon(plan.t)?;
    let n = plan.mesh;
    let sk = solve_skeleton(&pt, n)?;
    let h = sk.step();
    let baseline = drift_baseline(&pt, n, plan.t);
    let grad_ok = gradient_supported(&pt);
    let (target_var, mesh_var, obs_base) = match kind {
        FunctionalKind::State => {
            let fluct = euler_fluctuation_variance(&pt, &baseline, h);
            (beta_variance(&pt, &sk)?, *fluct.last().unwrap(), 0.0)
        }
        FunctionalKind::Additive => (
            gamma_variance(&pt, &sk)?,
            additive_mesh_variance(&pt, &baseline, h)?,
            observable_baseline(&pt, &baseline, h)?,
        ),
    };
    let ns = NoiseStream::new(plan.seed);
    let pool = thread_pool()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &eps in &plan.eps {
        let point = sweep_point(
            &pt, plan, kind, eps, &sk, &baseline, obs_base, grad_ok, target_var, &ns, &pool,
        );
        match point {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(SweepFailure {
                eps,
                message: e.to_string(),
            }),
        }
    }
    if rows.is_empty() {
        return Err(ExperimentError::BadPlan(
            "every sweep point failed; see recorded failures".into(),
        ));
    }
    Ok(SweepOutcome {
        plan: plan.clone(),
        kind,
        target_mu: 0.0,
        target_var,
        mesh_var,
        rows,
        failures,
    })
}

#[allow(clippy::too_many_arguments)]
fn sweep_point(
    pt: &Problem,
    plan: &SweepPlan,
    kind: FunctionalKind,
    eps: f64,
    sk: &crate::skeleton::Skeleton,
    baseline: &[f64],
    obs_base: f64,
    grad_ok: bool,
    target_var: f64,
    ns: &NoiseStream,
    pool: &rayon::ThreadPool,
) -> Result<SweepRow, ExperimentError> {
    let pairs = collect_samples(
        pt, plan, kind, eps, sk, baseline, obs_base, grad_ok, ns, pool,
    )?;
    let samples: Vec<MalliavinSample> = pairs.iter().map(|&(s, _)| s).collect();
    let fs: Vec<f64> = samples.iter().map(|s| s.f).collect();
    let (var_gap, var_gap_se) = paired_variance_gap(&pairs);
    let (sm, floor) = if grad_ok {
        let thetas: Vec<f64> = samples.iter().map(|s| s.theta).collect();
        let dus: Vec<f64> = samples.iter().map(|s| s.dtheta_u).collect();
        let sm = score_by_regression(&fs, &thetas, &dus)?;
        let floor = estimator_floor(ScoreMethod::Regression, plan.paths, 0.0, target_var)?;
        (sm, floor)
    } else {
        let sm = score_by_kde(&fs, 1.0)?;
        let floor = estimator_floor(ScoreMethod::Kde, plan.paths, 0.0, target_var)?;
        (sm, floor)
    };
    let report = build_report(&sm, &fs, 0.0, target_var)?;
    let verdict = pinsker_check(&report);
    let (mean_f, mean_f_se) = mean_and_se(&fs);
    let (var_f, var_f_se) = variance_and_se(&fs);
    Ok(SweepRow {
        eps,
        report,
        fisher_floor: floor,
        mean_f,
        mean_f_se,
        var_f,
        var_f_se,
        var_gap,
        var_gap_se,
        pinsker_pass: verdict.pass,
        pinsker_slack: verdict.slack,
    })
}

/// var(F) - var(G) from the coupled pairs, with the standard error of
/// the per-path difference of squared deviations.
fn paired_variance_gap(pairs: &[(MalliavinSample, f64)]) -> (f64, f64) {
    let fbar = pairs.iter().map(|p| p.0.f).sum::<f64>() / pairs.len() as f64;
    let gbar = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    let ds: Vec<f64> = pairs
        .iter()
        .map(|&(s, g)| (s.f - fbar) * (s.f - fbar) - (g - gbar) * (g - gbar))
        .collect();
    mean_and_se(&ds)
}

/// Runs the evaluation ensemble: per path, the Malliavin sample plus the
/// linearized fluctuation G driven by the same Brownian increments.
#[allow(clippy::too_many_arguments)]
fn collect_samples(
    pt: &Problem,
    plan: &SweepPlan,
    kind: FunctionalKind,
    eps: f64,
    sk: &crate::skeleton::Skeleton,
    baseline: &[f64],
    obs_base: f64,
    with_gradient: bool,
    ns: &NoiseStream,
    pool: &rayon::ThreadPool,
) -> Result<Vec<(MalliavinSample, f64)>, ExperimentError> {
    let projs = build_projection_set(
        pt,
        eps,
        sk,
        &ns.substream(PROJ_TAG),
        plan.proj_paths,
        plan.proj_bins,
        with_gradient,
        kind == FunctionalKind::Additive,
    )?;
    let n = sk.intervals();
    let h = sk.step();
    let baseline_end = baseline[n];
    let mut lin_a = vec![0.0; n];
    let mut lin_s = vec![0.0; n];
    for i in 0..n {
        let t = h * i as f64;
        lin_a[i] = 1.0 + pt.b1(t, baseline[i]) * h;
        lin_s[i] = pt.sigma(t, baseline[i]);
    }
    let obs_w = match kind {
        FunctionalKind::State => None,
        FunctionalKind::Additive => {
            let w = quad::simpson_weights(n, h)?;
            Some(
                (0..=n)
                    .map(|s| w[s] * pt.f1(h * s as f64, baseline[s]).unwrap_or(0.0))
                    .collect::<Vec<f64>>(),
            )
        }
    };
    let eval = ns.substream(EVAL_TAG);
    pool.install(|| {
        (0..plan.paths as u64)
            .into_par_iter()
            .map(|id| -> Result<(MalliavinSample, f64), ExperimentError> {
                let ps = simulate_sde(pt, eps, &eval, id, sk)?;
                let mut g = 0.0;
                let g_lin = match &obs_w {
                    None => {
                        for i in 0..n {
                            g = g * lin_a[i] + lin_s[i] * ps.incr[i];
                        }
                        g
                    }
                    Some(wf1) => {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += wf1[i] * g;
                            g = g * lin_a[i] + lin_s[i] * ps.incr[i];
                        }
                        acc + wf1[n] * g
                    }
                };
                let sample = match kind {
                    FunctionalKind::State => {
                        state_sample(pt, &ps, baseline_end, &projs, with_gradient)?
                    }
                    FunctionalKind::Additive => {
                        additive_fields(pt, &ps, obs_base, &projs, with_gradient)?
                    }
                };
                Ok((sample, g_lin))
            })
            .collect::<Result<Vec<_>, _>>()
    })
}

/// Resolution limit of the Fisher estimator on a true Gaussian sample
/// of size n: estimates below this are indistinguishable from zero.
///
/// Two pieces. The regression score centers at the sample mean, so a
/// null sample with mean offset z*sigma/sqrt(n) reads back as fisher
/// ~= z^2/(n sigma^2); the first term covers that up to |z| = 4. The
/// second is the score-table wiggle, measured by running the estimator
/// on a noise-free normal-scores sample (exact Gaussian quantiles at
/// (i+1/2)/n), tripled for draw-to-draw spread.
fn estimator_floor(
    method: ScoreMethod,
    n: usize,
    mu: f64,
    sigma2: f64,
) -> Result<f64, ExperimentError> {
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sd = sigma2.sqrt();
    let fs: Vec<f64> = (0..n)
        .map(|i| mu + sd * normal.inverse_cdf((i as f64 + 0.5) / n as f64))
        .collect();
    let sm = match method {
        ScoreMethod::Regression => {
            let thetas = vec![sigma2; n];
            let dus = vec![0.0; n];
            score_by_regression(&fs, &thetas, &dus)?
        }
        ScoreMethod::Kde => score_by_kde(&fs, 1.0)?,
    };
    let wiggle = fisher_distance(&sm, &fs, mu, sigma2)?.estimate;
    Ok(MEAN_TERM_Q / (n as f64 * sigma2) + 3.0 * wiggle)
}

/// Exact fluctuation variance of the discretized additive observable at
/// eps -> 0: there the chain is linear in the increments, so the
/// isometry over increments applies with the discrete flow products.
fn additive_mesh_variance(
    p: &Problem,
    baseline: &[f64],
    h: f64,
) -> Result<f64, ExperimentError> {
    let n = baseline.len() - 1;
    let w = quad::simpson_weights(n, h)?;
    let mut flow = vec![1.0; n + 1];
    for i in 0..n {
        flow[i + 1] = flow[i] * (1.0 + p.b1(h * i as f64, baseline[i]) * h);
    }
    let mut suffix = vec![0.0; n + 2];
    for s in (0..=n).rev() {
        let f1 = p.f1(h * s as f64, baseline[s]).unwrap_or(0.0);
        suffix[s] = suffix[s + 1] + w[s] * f1 * flow[s];
    }
    let mut var = 0.0;
    for j in 0..n {
        let c = p.sigma(h * j as f64, baseline[j]) * suffix[j + 1] / flow[j + 1];
        var += c * c * h;
    }
    Ok(var)
}

/// One point of a log-log rate fit.
#[derive(Debug, Clone, Serialize)]
pub struct RatePoint {
    pub eps: f64,
    pub value: f64,
    pub stderr: f64,
    pub excluded: bool,
    pub reason: Option<String>,
}

/// Ordinary least squares on (log eps, log value) after the noise-floor
/// exclusion, with the exclusions kept on record.
#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    pub quantity: String,
    pub points: Vec<RatePoint>,
    pub used: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_se: f64,
}

/// Applies the exclusion rules: nonpositive values cannot be logged,
/// and values under three standard errors are Monte Carlo noise.
pub fn classify_points(pts: &[(f64, f64, f64)]) -> Vec<RatePoint> {
    pts.iter()
        .map(|&(eps, value, stderr)| {
            let (excluded, reason) = if !value.is_finite() || value <= 0.0 {
                (true, Some("nonpositive value".to_string()))
            } else if value < 3.0 * stderr {
                (true, Some("below noise floor".to_string()))
            } else {
                (false, None)
            };
            RatePoint {
                eps,
                value,
                stderr,
                excluded,
                reason,
            }
        })
        .collect()
}

pub fn rate_fit(quantity: &str, pts: &[(f64, f64, f64)]) -> Result<RateFit, ExperimentError> {
    let points = classify_points(pts);
    let usable: Vec<&RatePoint> = points.iter().filter(|p| !p.excluded).collect();
    if usable.len() < 3 {
        return Err(ExperimentError::InsufficientSignal {
            usable: usable.len(),
            total: points.len(),
        });
    }
    let xs: Vec<f64> = usable.iter().map(|p| p.eps.ln()).collect();
    let ys: Vec<f64> = usable.iter().map(|p| p.value.ln()).collect();
    let fit = fit_line(&xs, &ys)?;
    Ok(RateFit {
        quantity: quantity.to_string(),
        used: usable.len(),
        points,
        slope: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        slope_se: fit.slope_se,
    })
}

/// The standard per-sweep rate fits: Fisher (floor-aware), Kolmogorov
/// (DKW-band floor), |mean|, and the mesh-centered |variance gap|.
pub fn outcome_rate_fits(
    outcome: &SweepOutcome,
) -> Vec<(String, Result<RateFit, ExperimentError>)> {
    let fisher: Vec<(f64, f64, f64)> = outcome
        .rows
        .iter()
        .map(|r| {
            (
                r.eps,
                r.report.fisher,
                r.report.fisher_se.max(r.fisher_floor),
            )
        })
        .collect();
    let kol: Vec<(f64, f64, f64)> = outcome
        .rows
        .iter()
        .map(|r| (r.eps, r.report.kolmogorov, 0.5 * r.report.kolmogorov_band))
        .collect();
    let abs_mean: Vec<(f64, f64, f64)> = outcome
        .rows
        .iter()
        .map(|r| (r.eps, r.mean_f.abs(), r.mean_f_se))
        .collect();
    let var_gap: Vec<(f64, f64, f64)> = outcome
        .rows
        .iter()
        .map(|r| (r.eps, r.var_gap.abs(), r.var_gap_se))
        .collect();
    vec![
        ("fisher".to_string(), rate_fit("fisher", &fisher)),
        ("kolmogorov".to_string(), rate_fit("kolmogorov", &kol)),
        ("abs_mean".to_string(), rate_fit("abs_mean", &abs_mean)),
        ("var_gap".to_string(), rate_fit("var_gap", &var_gap)),
    ]
}

/// Every measurable ingredient of the information bound at one (eps, t),
/// assembled with the unknown absolute constant set to 1. The result is
/// a shape/scaling object, not a certified numeric bound.
#[derive(Debug, Clone, Serialize)]
pub struct BoundComponents {
    pub eps: f64,
    pub t: f64,
    pub paths: usize,
    /// (mean F)^2 and its delta-method error.
    pub mean_sq: f64,
    pub mean_sq_se: f64,
    /// (Var F - mesh-centered target variance)^2.
    pub var_gap_sq: f64,
    pub var_gap_sq_se: f64,
    /// E ||D Theta||^4 and sqrt of it.
    pub grad_fourth: f64,
    pub grad_fourth_se: f64,
    pub grad_root: f64,
    pub u_eighth: f64,
    pub theta_inv8: f64,
    pub theta_inv16: f64,
    pub a_f: f64,
    pub c_f: f64,
    pub term_mean: f64,
    pub term_var: f64,
    pub term_grad: f64,
    pub bound: f64,
    pub fisher: f64,
    pub fisher_se: f64,
    /// Sanity envelope: the Fisher estimate should not exceed 50x the
    /// assembled bound; a violation is flagged, not fatal.
    pub shape_ok: bool,
}

/// Assembles the bound ingredients at a single eps, sharing random
/// numbers with `sweep` so the two see identical ensembles.
pub fn bound_components(
    p: &Problem,
    plan: &SweepPlan,
    eps: f64,
) -> Result<BoundComponents, ExperimentError> {
    plan.check()?;
    if !gradient_supported(p) {
        return Err(FunctionalError::UnsupportedDiffusion {
            label: p.label().to_string(),
        }
        .into());
    }
    let pt = p.clone().with_horizon(plan.t)?;
    let n = plan.mesh;
    let sk = solve_skeleton(&pt, n)?;
    let baseline = drift_baseline(&pt, n, plan.t);
    let target_var = beta_variance(&pt, &sk)?;
    let ns = NoiseStream::new(plan.seed);
    let pool = thread_pool()?;
    let pairs = collect_samples(
        &pt,
        plan,
        FunctionalKind::State,
        eps,
        &sk,
        &baseline,
        0.0,
        true,
        &ns,
        &pool,
    )?;
    let samples: Vec<MalliavinSample> = pairs.iter().map(|&(s, _)| s).collect();
    let fs: Vec<f64> = samples.iter().map(|s| s.f).collect();
    let thetas: Vec<f64> = samples.iter().map(|s| s.theta).collect();
    let dus: Vec<f64> = samples.iter().map(|s| s.dtheta_u).collect();
    let norms: Vec<f64> = samples.iter().map(|s| s.dtheta_norm2).collect();
    let u8s: Vec<f64> = samples.iter().map(|s| s.u_norm2.powi(4)).collect();

    let (mean_f, mean_f_se) = mean_and_se(&fs);
    let (var_gap, var_gap_se) = paired_variance_gap(&pairs);
    let fourths: Vec<f64> = norms.iter().map(|&x| x * x).collect();
    let (grad_fourth, grad_fourth_se) = mean_and_se(&fourths);
    let u_eighth = crate::stats::mean(&u8s);
    let theta_inv8 = negative_moment(&thetas, 8.0)?.estimate;
    let theta_inv16 = negative_moment(&thetas, 16.0)?.estimate;

    let sigma4 = target_var * target_var;
    let a_f = (u_eighth * theta_inv8).powf(0.25) / sigma4;
    let c_f = a_f + (u_eighth * theta_inv16).powf(0.25);
    let term_mean = mean_f * mean_f / sigma4;
    let term_var = a_f * var_gap * var_gap;
    let grad_root = grad_fourth.max(0.0).sqrt();
    let term_grad = c_f * grad_root;
    let bound = term_mean + term_var + term_grad;

    let sm = score_by_regression(&fs, &thetas, &dus)?;
    let fe = fisher_distance(&sm, &fs, 0.0, target_var)?;

    Ok(BoundComponents {
        eps,
        t: plan.t,
        paths: plan.paths,
        mean_sq: mean_f * mean_f,
        mean_sq_se: 2.0 * mean_f.abs() * mean_f_se + mean_f_se * mean_f_se,
        var_gap_sq: var_gap * var_gap,
        var_gap_sq_se: 2.0 * var_gap.abs() * var_gap_se + var_gap_se * var_gap_se,
        grad_fourth,
        grad_fourth_se,
        grad_root,
        u_eighth,
        theta_inv8,
        theta_inv16,
        a_f,
        c_f,
        term_mean,
        term_var,
        term_grad,
        bound,
        fisher: fe.estimate,
        fisher_se: fe.stderr,
        shape_ok: fe.estimate <= 50.0 * bound,
    })
}

/// `bound_components` across the whole eps grid of the plan.
pub fn bound_sweep(p: &Problem, plan: &SweepPlan) -> Result<Vec<BoundComponents>, ExperimentError> {
    plan.eps
        .iter()
        .map(|&eps| bound_components(p, plan, eps))
        .collect()
}

/// Empirical lower-bound estimate from the limit pair: the conditional
/// mean of the divergence functional given the Gaussian endpoint, folded
/// into (E|E[delta | U]|)^2 / (4 beta^4).
#[derive(Debug, Clone, Serialize)]
pub struct LowerBoundResult {
    pub paths: usize,
    pub beta2: f64,
    pub mean_abs_regression: f64,
    pub mean_abs_se: f64,
    pub lower: f64,
    pub lower_se: f64,
}

pub fn lower_bound_experiment(
    p: &Problem,
    t: f64,
    paths: usize,
    mesh: usize,
    seed: u64,
) -> Result<LowerBoundResult, ExperimentError> {
    if paths < 1000 {
        return Err(ExperimentError::BadPlan(format!(
            "need at least 1000 limit-pair paths, got {paths}"
        )));
    }
    let pt = p.clone().with_horizon(t)?;
    let sk = solve_skeleton(&pt, mesh)?;
    let beta2 = beta_variance(&pt, &sk)?;
    let c = limit_coeffs(&pt, &sk);
    let ns = NoiseStream::new(seed).substream(LOWER_TAG);
    let pool = thread_pool()?;
    let mut pairs: Vec<(f64, f64)> = pool.install(|| {
        (0..paths as u64)
            .into_par_iter()
            .map(|id| {
                let lp = simulate_limit_pair(&c, &ns, id);
                (lp.u[c.n], skorokhod_functional(&c, &lp))
            })
            .collect()
    });
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let us: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ds: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let knots = quantile_knots(&us, 128);
    if knots.len() < 2 {
        return Err(DistanceError::DegenerateSamples.into());
    }
    let bw = silverman_bandwidth(&us);
    let fitted = nw_regress_sorted(&us, &ds, &knots, bw);
    let vals: Vec<f64> = us
        .iter()
        .map(|&u| interp_clamped(&knots, &fitted, u).abs())
        .collect();
    let (mean_abs, mean_abs_se) = mean_and_se(&vals);
    let denom = 4.0 * beta2 * beta2;
    Ok(LowerBoundResult {
        paths,
        beta2,
        mean_abs_regression: mean_abs,
        mean_abs_se,
        lower: mean_abs * mean_abs / denom,
        lower_se: 2.0 * mean_abs * mean_abs_se / denom,
    })
}

fn interp_clamped(knots: &[f64], vals: &[f64], x: f64) -> f64 {
    let last = knots.len() - 1;
    if x <= knots[0] {
        return vals[0];
    }
    if x >= knots[last] {
        return vals[last];
    }
    let hi = knots.partition_point(|&k| k <= x);
    let lo = hi - 1;
    let span = knots[hi] - knots[lo];
    if span <= 0.0 {
        return vals[lo];
    }
    let w = (x - knots[lo]) / span;
    vals[lo] + w * (vals[hi] - vals[lo])
}

/// Per-eps consistency check of the sweep against the lower bound:
/// fisher/eps^2 should not undercut the lower estimate beyond noise.
#[derive(Debug, Clone, Serialize)]
pub struct LowerComparisonRow {
    pub eps: f64,
    pub fisher_over_eps2: f64,
    pub se: f64,
    pub consistent: bool,
}

pub fn lower_comparison(
    outcome: &SweepOutcome,
    lb: &LowerBoundResult,
) -> Vec<LowerComparisonRow> {
    outcome
        .rows
        .iter()
        .map(|r| {
            let e2 = r.eps * r.eps;
            let ratio = r.report.fisher / e2;
            let se = r.report.fisher_se / e2;
            let band = 2.0 * (se * se + lb.lower_se * lb.lower_se).sqrt();
            LowerComparisonRow {
                eps: r.eps,
                fisher_over_eps2: ratio,
                se,
                consistent: ratio >= lb.lower - band,
            }
        })
        .collect()
}

fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

/// Serializes one sweep (plus optional fits and bound rows) under
/// `root/<unix-seconds>-<label>/`. File contents carry no timestamps,
/// so identical plans reproduce byte-identical reports.
pub fn persist_run(
    root: &Path,
    outcome: &SweepOutcome,
    fits: &[(String, Result<RateFit, ExperimentError>)],
    bounds: &[BoundComponents],
) -> Result<PathBuf, ExperimentError> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock after epoch")
        .as_secs();
    let label = sanitize_label(&outcome.plan.problem);
    let mut dir = root.join(format!("{secs}-{label}"));
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{secs}-{label}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir)?;

    fs::write(
        dir.join("plan.json"),
        serde_json::to_string_pretty(&outcome.plan)?,
    )?;
    fs::write(dir.join("reports.csv"), render_reports_csv(outcome))?;
    fs::write(dir.join("ratefits.csv"), render_ratefits_csv(fits))?;
    fs::write(dir.join("bound_components.csv"), render_bounds_csv(bounds))?;
    let meta = serde_json::json!({
        "problem": outcome.plan.problem,
        "kind": outcome.kind.as_str(),
        "seed": outcome.plan.seed,
        "mesh": outcome.plan.mesh,
        "t": outcome.plan.t,
        "paths": outcome.plan.paths,
        "eps": outcome.plan.eps,
        "plan": outcome.plan,
        "target_mu": outcome.target_mu,
        "target_var": outcome.target_var,
        "mesh_var": outcome.mesh_var,
        "version": env!("CARGO_PKG_VERSION"),
        "failures": outcome.failures,
    });
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(dir)
}

pub fn render_reports_csv(outcome: &SweepOutcome) -> String {
    let mut out = String::from("#schema=sweep-report-v1\n");
    out.push_str(
        "kind,eps,n,mu,sigma2,fisher,fisher_se,fisher_floor,kolmogorov,kolmogorov_band,\
         outside_fraction,method,bandwidth,knot_count,mean_f,mean_f_se,var_f,var_f_se,\
         var_gap,var_gap_se,pinsker_pass,pinsker_slack\n",
    );
    for r in &outcome.rows {
        let method = match r.report.method {
            ScoreMethod::Regression => "regression",
            ScoreMethod::Kde => "kde",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            outcome.kind.as_str(),
            r.eps,
            r.report.n,
            r.report.mu,
            r.report.sigma2,
            r.report.fisher,
            r.report.fisher_se,
            r.fisher_floor,
            r.report.kolmogorov,
            r.report.kolmogorov_band,
            r.report.outside_fraction,
            method,
            r.report.bandwidth,
            r.report.knot_count,
            r.mean_f,
            r.mean_f_se,
            r.var_f,
            r.var_f_se,
            r.var_gap,
            r.var_gap_se,
            r.pinsker_pass,
            r.pinsker_slack,
        ));
    }
    out
}

pub fn render_ratefits_csv(fits: &[(String, Result<RateFit, ExperimentError>)]) -> String {
    let mut out = String::from("#schema=rate-fit-v1\n");
    out.push_str("quantity,eps,value,stderr,excluded,reason,slope,intercept,r2,slope_se,note\n");
    for (name, fit) in fits {
        match fit {
            Ok(f) => {
                for pt in &f.points {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{},\n",
                        name,
                        pt.eps,
                        pt.value,
                        pt.stderr,
                        pt.excluded,
                        pt.reason.as_deref().unwrap_or(""),
                        f.slope,
                        f.intercept,
                        f.r2,
                        f.slope_se,
                    ));
                }
            }
            Err(e) => {
                out.push_str(&format!("{name},,,,,,,,,,{e}\n"));
            }
        }
    }
    out
}

pub fn render_bounds_csv(bounds: &[BoundComponents]) -> String {
    let mut out = String::from("#schema=bound-components-v1\n");
    out.push_str(
        "eps,t,paths,mean_sq,mean_sq_se,var_gap_sq,var_gap_sq_se,grad_fourth,grad_fourth_se,\
         grad_root,u_eighth,theta_inv8,theta_inv16,a_f,c_f,term_mean,term_var,term_grad,bound,\
         fisher,fisher_se,shape_ok\n",
    );
    for b in bounds {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            b.eps,
            b.t,
            b.paths,
            b.mean_sq,
            b.mean_sq_se,
            b.var_gap_sq,
            b.var_gap_sq_se,
            b.grad_fourth,
            b.grad_fourth_se,
            b.grad_root,
            b.u_eighth,
            b.theta_inv8,
            b.theta_inv16,
            b.a_f,
            b.c_f,
            b.term_mean,
            b.term_var,
            b.term_grad,
            b.bound,
            b.fisher,
            b.fisher_se,
            b.shape_ok,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::builtin;
    use approx::assert_relative_eq;

    #[test]
    fn plan_check_rejects_bad_grids() {
        let mut plan = SweepPlan::new("P1_ou", 1);
        plan.eps = vec![];
        assert!(matches!(plan.check(), Err(ExperimentError::BadPlan(_))));
        plan.eps = vec![0.1, 0.2];
        assert!(plan.check().is_err());
        plan.eps = vec![0.2, 0.2];
        assert!(plan.check().is_err());
        plan.eps = vec![1.5, 0.2];
        assert!(plan.check().is_err());
        plan.eps = vec![0.2, 0.1];
        assert!(plan.check().is_ok());
        plan.paths = 999;
        assert!(plan.check().is_err());
        plan.paths = 1000;
        plan.mesh = 33;
        assert!(plan.check().is_err());
        plan.mesh = 32;
        plan.t = 0.0;
        assert!(plan.check().is_err());
    }

    #[test]
    fn rate_fit_recovers_exact_power_laws() {
        let pts: Vec<(f64, f64, f64)> = DEFAULT_EPS_GRID
            .iter()
            .map(|&e| (e, e * e, 1e-12))
            .collect();
        let fit = rate_fit("sq", &pts).unwrap();
        assert_relative_eq!(fit.slope, 2.0, max_relative = 1e-12);
        assert_relative_eq!(fit.r2, 1.0, max_relative = 1e-12);
        assert_eq!(fit.used, 7);

        let pts: Vec<(f64, f64, f64)> = DEFAULT_EPS_GRID
            .iter()
            .map(|&e| (e, 3.0 * e, 1e-12))
            .collect();
        let fit = rate_fit("lin", &pts).unwrap();
        assert_relative_eq!(fit.slope, 1.0, max_relative = 1e-12);
        assert_relative_eq!(fit.intercept, 3.0_f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn rate_fit_excludes_noise_floor_points() {
        let mut pts: Vec<(f64, f64, f64)> = vec![0.4, 0.2, 0.1, 0.05, 0.025]
            .into_iter()
            .map(|e| (e, e * e, 1e-9))
            .collect();
        pts[3] = (0.05, 1e-7, 1e-6);
        pts[4] = (0.025, 1e-7, 1e-6);
        let fit = rate_fit("sq", &pts).unwrap();
        assert_eq!(fit.used, 3);
        let excluded: Vec<f64> = fit
            .points
            .iter()
            .filter(|p| p.excluded)
            .map(|p| p.eps)
            .collect();
        assert_eq!(excluded, vec![0.05, 0.025]);
        assert!(fit
            .points
            .iter()
            .filter(|p| p.excluded)
            .all(|p| p.reason.as_deref() == Some("below noise floor")));
        assert_relative_eq!(fit.slope, 2.0, max_relative = 1e-9);
    }

    #[test]
    fn rate_fit_flags_nonpositive_and_insufficient() {
        let pts = vec![(0.4, 0.16, 1e-9), (0.2, -0.01, 1e-9), (0.1, 0.01, 1e-9)];
        let err = rate_fit("bad", &pts).unwrap_err();
        assert!(matches!(
            err,
            ExperimentError::InsufficientSignal { usable: 2, total: 3 }
        ));
        let cls = classify_points(&pts);
        assert_eq!(cls[1].reason.as_deref(), Some("nonpositive value"));
    }

    fn small_plan(problem: &str) -> SweepPlan {
        let mut plan = SweepPlan::new(problem, 41);
        plan.mesh = 32;
        plan.eps = vec![0.2, 0.1];
        plan.paths = 1200;
        plan.proj_paths = 800;
        plan.proj_bins = 16;
        plan
    }

    #[test]
    fn state_sweep_on_ou_uses_regression_and_is_deterministic() {
        let p = builtin("P1_ou").unwrap();
        let plan = small_plan("P1_ou");
        let out1 = sweep(&p, &plan).unwrap();
        assert_eq!(out1.rows.len(), 2);
        assert!(out1.failures.is_empty());
        for row in &out1.rows {
            assert_eq!(row.report.method, ScoreMethod::Regression);
            assert!(row.fisher_floor > 0.0);
            assert!(row.report.kolmogorov_band > 0.0);
        }
        assert_relative_eq!(
            out1.target_var,
            0.43233235838169365,
            max_relative = 1e-6
        );
        let out2 = sweep(&p, &plan).unwrap();
        assert_eq!(render_reports_csv(&out1), render_reports_csv(&out2));
    }

    #[test]
    fn null_problem_reports_insufficient_fisher_signal() {
        let p = builtin("P0_pure_noise").unwrap();
        let mut plan = small_plan("P0_pure_noise");
        plan.eps = vec![0.4, 0.2, 0.1];
        plan.paths = 1500;
        let out = sweep(&p, &plan).unwrap();
        let fits = outcome_rate_fits(&out);
        let fisher = fits.iter().find(|(n, _)| n == "fisher").unwrap();
        assert!(matches!(
            fisher.1,
            Err(ExperimentError::InsufficientSignal { .. })
        ));
    }

    #[test]
    fn bound_components_on_linear_drift_kills_gradient_term() {
        let p = builtin("P1_ou").unwrap();
        let plan = small_plan("P1_ou");
        let b = bound_components(&p, &plan, 0.2).unwrap();
        assert_eq!(b.term_grad, 0.0);
        assert_eq!(b.grad_fourth, 0.0);
        assert!(b.c_f >= b.a_f);
        assert!(b.bound >= b.term_mean.max(b.term_var).max(b.term_grad));
        assert!(b.theta_inv8 > 0.0 && b.theta_inv16 > b.theta_inv8);
    }

    #[test]
    fn bound_components_rejects_state_dependent_diffusion() {
        let p = builtin("P3_cos_diffusion").unwrap();
        let plan = small_plan("P3_cos_diffusion");
        let err = bound_components(&p, &plan, 0.2).unwrap_err();
        assert!(matches!(
            err,
            ExperimentError::Functional(FunctionalError::UnsupportedDiffusion { .. })
        ));
    }

    #[test]
    fn lower_bound_vanishes_for_linear_drift() {
        let p = builtin("P1_ou").unwrap();
        let lb = lower_bound_experiment(&p, 1.0, 1200, 32, 7).unwrap();
        assert_eq!(lb.lower, 0.0);
        assert_eq!(lb.mean_abs_regression, 0.0);
        assert!(lb.beta2 > 0.0);
    }

    #[test]
    fn lower_bound_positive_for_sine_drift() {
        let p = builtin("P2_sine_drift").unwrap();
        let lb = lower_bound_experiment(&p, 1.0, 20_000, 64, 7).unwrap();
        assert!(lb.lower > 0.0);
        assert!(lb.lower > 2.0 * lb.lower_se, "lower {} se {}", lb.lower, lb.lower_se);
    }

    #[test]
    fn additive_sweep_with_linear_observable_runs_clean() {
        let p = builtin("P1_ou")
            .unwrap()
            .with_observable("x", "1", "0")
            .unwrap();
        let plan = small_plan("P1_ou");
        let out = additive_sweep(&p, &plan).unwrap();
        assert_eq!(out.kind, FunctionalKind::Additive);
        assert_eq!(out.rows.len(), 2);
        assert!(out.failures.is_empty());
        assert_relative_eq!(out.target_var, 0.1680912407245783, max_relative = 1e-3);
        for row in &out.rows {
            assert_eq!(row.report.method, ScoreMethod::Regression);
        }
    }

    #[test]
    fn additive_sweep_requires_observable() {
        let p = builtin("P3_cos_diffusion").unwrap();
        let plan = small_plan("P3_cos_diffusion");
        let err = additive_sweep(&p, &plan).unwrap_err();
        assert!(matches!(
            err,
            ExperimentError::Functional(FunctionalError::MissingObservable)
        ));
    }

    #[test]
    fn state_sweep_handles_general_diffusion_via_kde() {
        let p = builtin("P3_cos_diffusion").unwrap();
        let mut plan = small_plan("P3_cos_diffusion");
        plan.eps = vec![0.2];
        let out = sweep(&p, &plan).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].report.method, ScoreMethod::Kde);
    }

    #[test]
    fn persist_run_writes_reproducible_artifacts() {
        let p = builtin("P1_ou").unwrap();
        let mut plan = small_plan("P1_ou");
        plan.eps = vec![0.3, 0.15];
        plan.paths = 1000;
        plan.proj_paths = 300;
        plan.proj_bins = 8;
        plan.mesh = 16;
        let out = sweep(&p, &plan).unwrap();
        let fits = outcome_rate_fits(&out);
        let dir = tempfile::tempdir().unwrap();
        let run1 = persist_run(dir.path(), &out, &fits, &[]).unwrap();
        for name in ["plan.json", "reports.csv", "ratefits.csv", "bound_components.csv", "meta.json"] {
            assert!(run1.join(name).exists(), "missing {name}");
        }
        let reports = fs::read_to_string(run1.join("reports.csv")).unwrap();
        assert!(reports.starts_with("#schema=sweep-report-v1\n"));
        let loaded: SweepPlan =
            serde_json::from_str(&fs::read_to_string(run1.join("plan.json")).unwrap()).unwrap();
        assert_eq!(loaded, plan);
        let run2 = persist_run(dir.path(), &out, &fits, &[]).unwrap();
        assert_ne!(run1, run2);
        let reports2 = fs::read_to_string(run2.join("reports.csv")).unwrap();
        assert_eq!(reports, reports2);
    }

    #[test]
    fn lower_comparison_marks_consistent_rows() {
        let p = builtin("P1_ou").unwrap();
        let plan = small_plan("P1_ou");
        let out = sweep(&p, &plan).unwrap();
        let lb = lower_bound_experiment(&p, 1.0, 1200, 32, 7).unwrap();
        let rows = lower_comparison(&out, &lb);
        assert_eq!(rows.len(), out.rows.len());
        // the lower estimate is exactly zero here, so every row passes
        assert!(rows.iter().all(|r| r.consistent));
    }
}

