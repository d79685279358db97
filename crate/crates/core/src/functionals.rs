//! Pathwise scalar functionals built on the derivative fields: the
//! projected integrand u_r = E[D_r F | F_r], the quadratic functional
//! Theta, its Malliavin gradient, negative moments with tail
//! diagnostics, the Volterra negative-moment scaling check, and the
//! additive-observable analogues.
//!
//! Conditional expectations are never available in closed form for
//! nonlinear drifts; they are estimated once per (problem, eps, mesh)
//! on an independent ensemble, either by Markov regression (binned
//! means against X_r) or by branching continuations, then shared
//! read-only by every evaluation path.

use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;
use thiserror::Error;

use crate::noise::NoiseStream;
use crate::paths::{
    continue_flow, growth_and_curvature, simulate_sde, simulate_sde_into, DerivativeField,
    PathError, PathState, SecondDerivativeField,
};
use crate::problem::{Problem, ProblemError};
use crate::quad::{self, QuadError};
use crate::skeleton::{Skeleton, SkeletonError};
use crate::stats::{fit_line, jackknife_se_mean, mean, quantile_sorted, StatsError};

/// Cells keep at least this many samples; lighter cells merge rightward.
const MIN_CELL: u32 = 50;

/// Suffix trapezoid sums: out[r] = integral of g over [t_r, t_n] by the
/// composite trapezoid rule on the tail nodes. Simpson weights restricted
/// to a suffix carry an O(h) boundary mismatch (the tail starts mid
/// pattern), so tail integrals use this instead.
fn suffix_trapezoid(g: &[f64], h: f64) -> Vec<f64> {
    let n = g.len() - 1;
    let mut out = vec![0.0; n + 1];
    let mut acc = 0.0;
    for r in (0..=n).rev() {
        acc += g[r];
        out[r] = h * (acc - 0.5 * g[r] - 0.5 * g[n]);
    }
    out
}

#[derive(Debug, Error)]
pub enum FunctionalError {
    #[error("problem has no observable integrand f")]
    MissingObservable,
    #[error("gradient functionals need vanishing diffusion derivatives; {label} has sigma' or sigma'' != 0 (use the branching flag)")]
    UnsupportedDiffusion { label: String },
    #[error("projection set lacks the {0} table")]
    MissingProjection(&'static str),
    #[error("sample {index} is nonpositive ({value})")]
    NonpositiveSample { index: usize, value: f64 },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("moment exponent must be positive, got {0}")]
    BadExponent(f64),
    #[error("diffusion vanishes at the start point; negative moments are unbounded")]
    DiffusionVanishesAtStart,
    #[error("horizon list needs at least two increasing positive entries")]
    BadHorizonList,
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProjMethod {
    MarkovRegression,
    Branching,
}

/// How to estimate the conditional projection.
#[derive(Debug, Clone, Copy)]
pub enum ProjSpec {
    /// Binned means of simulated (X_r, response) pairs.
    Markov { paths: usize, bins: usize },
    /// Nested Monte Carlo: `inner` fresh continuations per (path, node).
    Branching { outer: usize, inner: usize, bins: usize },
}

/// Table g(r, x) approximating a conditional expectation given X_r = x,
/// piecewise-constant over equal-probability x-cells per time node.
#[derive(Debug)]
pub struct ConditionalProjection {
    n: usize,
    pub method: ProjMethod,
    /// Inner cell boundaries per node, length cells - 1.
    bounds: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
    counts: Vec<Vec<u32>>,
    fallbacks: AtomicU64,
}

impl ConditionalProjection {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Looks up the cell containing x. Outside the sampled range the
    /// lookup clamps to the boundary cells; an empty cell (only possible
    /// in defensive scenarios) falls back to the nearest populated one
    /// and bumps the fallback counter.
    pub fn g(&self, r: usize, x: f64) -> f64 {
        let means = &self.means[r];
        if means.len() == 1 {
            return means[0];
        }
        let idx = self.bounds[r].partition_point(|&e| e <= x);
        if self.counts[r][idx] > 0 {
            return means[idx];
        }
        self.fallbacks.fetch_add(1, Ordering::Relaxed);
        for step in 1..means.len() {
            if idx >= step && self.counts[r][idx - step] > 0 {
                return means[idx - step];
            }
            if idx + step < means.len() && self.counts[r][idx + step] > 0 {
                return means[idx + step];
            }
        }
        0.0
    }

    pub fn cell_counts(&self, r: usize) -> &[u32] {
        &self.counts[r]
    }

    pub fn cell_means(&self, r: usize) -> &[f64] {
        &self.means[r]
    }

    pub fn fallback_count(&self) -> u64 {
        self.fallbacks.load(Ordering::Relaxed)
    }
}

/// Which conditional responses a projection pass should fit.
#[derive(Debug, Clone, Copy, Default)]
struct ResponsePlan {
    state: bool,
    state_curv: bool,
    obs: bool,
    obs_curv: bool,
}

/// The projections one evaluation pass can need: the state flow table
/// behind u_r, the curvature table behind E[D_theta D_r X | F_r], and
/// their observable counterparts.
#[derive(Debug)]
pub struct ProjectionSet {
    pub state: ConditionalProjection,
    pub state_curv: Option<ConditionalProjection>,
    pub obs: Option<ConditionalProjection>,
    pub obs_curv: Option<ConditionalProjection>,
}

/// True when the reduced gradient pipeline applies: both diffusion
/// derivatives vanish, so the second-derivative field factors through
/// the drift curvature alone.
pub fn gradient_supported(p: &Problem) -> bool {
    p.shortcuts.sigma_prime_zero && p.shortcuts.sigma_curvature_zero
}

/// Builds every requested table from one regression ensemble in two
/// passes over the same noise: marginals and bin edges first, then
/// responses accumulated directly into cells (nothing per-path is
/// retained).
pub fn build_projection_set(
    p: &Problem,
    eps: f64,
    sk: &Skeleton,
    ns: &NoiseStream,
    paths: usize,
    bins: usize,
    want_gradient: bool,
    want_observable: bool,
) -> Result<ProjectionSet, FunctionalError> {
    if want_gradient && !gradient_supported(p) {
        return Err(FunctionalError::UnsupportedDiffusion {
            label: p.label().to_string(),
        });
    }
    if want_observable && !p.has_observable() {
        return Err(FunctionalError::MissingObservable);
    }
    let plan = ResponsePlan {
        state: true,
        state_curv: want_gradient,
        obs: want_observable,
        obs_curv: want_gradient && want_observable,
    };
    let mut tables = markov_tables(p, eps, sk, ns, paths, bins, plan)?;
    Ok(ProjectionSet {
        state: tables[0].take().expect("state table always built"),
        state_curv: tables[1].take(),
        obs: tables[2].take(),
        obs_curv: tables[3].take(),
    })
}

/// The projection behind u_r alone, in either estimation mode.
pub fn conditional_projection(
    p: &Problem,
    eps: f64,
    sk: &Skeleton,
    spec: ProjSpec,
    ns: &NoiseStream,
) -> Result<ConditionalProjection, FunctionalError> {
    match spec {
        ProjSpec::Markov { paths, bins } => {
            let plan = ResponsePlan {
                state: true,
                ..ResponsePlan::default()
            };
            let mut tables = markov_tables(p, eps, sk, ns, paths, bins, plan)?;
            Ok(tables[0].take().expect("state table"))
        }
        ProjSpec::Branching { outer, inner, bins } => {
            branching_projection(p, eps, sk, ns, outer, inner, bins)
        }
    }
}

fn markov_tables(
    p: &Problem,
    eps: f64,
    sk: &Skeleton,
    ns: &NoiseStream,
    paths: usize,
    bins: usize,
    plan: ResponsePlan,
) -> Result<[Option<ConditionalProjection>; 4], FunctionalError> {
    if paths == 0 {
        return Err(FunctionalError::TooFewSamples { got: 0, need: 1 });
    }
    let n = sk.intervals();
    let bins = bins.max(1);

    // Pass 1: marginals of X_r and their quantile edges.
    let mut ps = simulate_sde(p, eps, ns, 0, sk)?;
    let mut xcols: Vec<Vec<f64>> = vec![Vec::with_capacity(paths); n + 1];
    for path in 0..paths {
        simulate_sde_into(p, eps, ns, path as u64, sk, &mut ps)?;
        for (col, &x) in xcols.iter_mut().zip(&ps.x) {
            col.push(x);
        }
    }
    let mut raw_edges: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    for col in &mut xcols {
        col.sort_by(|a, b| a.total_cmp(b));
        let edges: Vec<f64> = (0..=bins)
            .map(|j| quantile_sorted(col, j as f64 / bins as f64))
            .collect();
        raw_edges.push(edges);
    }
    drop(xcols);

    // Pass 2: replay the same paths and accumulate responses per cell.
    let kinds: [bool; 4] = [plan.state, plan.state_curv, plan.obs, plan.obs_curv];
    let mut sums = vec![vec![[0.0f64; 4]; bins]; n + 1];
    let mut counts = vec![vec![0u32; bins]; n + 1];
    let mut resp = vec![[0.0f64; 4]; n + 1];
    for path in 0..paths {
        simulate_sde_into(p, eps, ns, path as u64, sk, &mut ps)?;
        fill_responses(p, &ps, kinds, &mut resp);
        for r in 0..=n {
            let inner = &raw_edges[r][1..bins];
            let cell = inner.partition_point(|&e| e <= ps.x[r]);
            counts[r][cell] += 1;
            for k in 0..4 {
                sums[r][cell][k] += resp[r][k];
            }
        }
    }

    // Merge under-populated cells rightward, once; the merged layout is
    // shared by all response kinds.
    let mut bounds = Vec::with_capacity(n + 1);
    let mut merged_means: Vec<Vec<[f64; 4]>> = Vec::with_capacity(n + 1);
    let mut merged_cnts: Vec<Vec<u32>> = Vec::with_capacity(n + 1);
    for r in 0..=n {
        let mut cell_bounds = Vec::new();
        let mut cell_sums: Vec<[f64; 4]> = Vec::new();
        let mut cell_counts: Vec<u32> = Vec::new();
        let mut acc = [0.0f64; 4];
        let mut cnt = 0u32;
        for cell in 0..bins {
            cnt += counts[r][cell];
            for k in 0..4 {
                acc[k] += sums[r][cell][k];
            }
            if cnt >= MIN_CELL && cell + 1 < bins {
                cell_sums.push(acc);
                cell_counts.push(cnt);
                cell_bounds.push(raw_edges[r][cell + 1]);
                acc = [0.0; 4];
                cnt = 0;
            }
        }
        // Tail remainder: its own cell if full enough, else merged into
        // the previous one.
        if cnt >= MIN_CELL || cell_sums.is_empty() {
            cell_sums.push(acc);
            cell_counts.push(cnt);
        } else {
            let last = cell_sums.len() - 1;
            cell_bounds.pop();
            for k in 0..4 {
                cell_sums[last][k] += acc[k];
            }
            cell_counts[last] += cnt;
        }
        let means: Vec<[f64; 4]> = cell_sums
            .iter()
            .zip(&cell_counts)
            .map(|(s, &c)| {
                let d = if c > 0 { c as f64 } else { 1.0 };
                [s[0] / d, s[1] / d, s[2] / d, s[3] / d]
            })
            .collect();
        bounds.push(cell_bounds);
        merged_means.push(means);
        merged_cnts.push(cell_counts);
    }

    let mut out: [Option<ConditionalProjection>; 4] = [None, None, None, None];
    for k in 0..4 {
        if !kinds[k] {
            continue;
        }
        out[k] = Some(ConditionalProjection {
            n,
            method: ProjMethod::MarkovRegression,
            bounds: bounds.clone(),
            means: merged_means
                .iter()
                .map(|row| row.iter().map(|m| m[k]).collect())
                .collect(),
            counts: merged_cnts.clone(),
            fallbacks: AtomicU64::new(0),
        });
    }
    Ok(out)
}

/// Per-node regression responses for one path. Indices: 0 state flow,
/// 1 state curvature, 2 observable flow, 3 observable curvature.
fn fill_responses(p: &Problem, ps: &PathState, kinds: [bool; 4], out: &mut [[f64; 4]]) {
    let n = ps.n();
    if kinds[0] {
        for r in 0..=n {
            out[r][0] = ps.flow_factor(r, n);
        }
    }
    let need_curv = kinds[1] || kinds[3];
    let (e, k) = if need_curv || kinds[2] {
        growth_and_curvature(p, ps)
    } else {
        (Vec::new(), Vec::new())
    };
    if kinds[1] {
        for r in 0..=n {
            let log_e = ps.drift_exp[n] - 2.0 * ps.drift_exp[r];
            out[r][1] = log_e.exp() * (k[n] - k[r]);
        }
    }
    if kinds[2] {
        // Tail integral of f'(t_s, X_s) e^{G_s}, then divide by e^{G_r}.
        let vals: Vec<f64> = (0..=n)
            .map(|s| {
                p.f1(ps.time(s), ps.x[s]).unwrap_or(0.0)
                    * (ps.drift_exp[s] + ps.log_z[s]).exp()
            })
            .collect();
        let sf = suffix_trapezoid(&vals, ps.h);
        for r in 0..=n {
            out[r][2] = sf[r] * (-(ps.drift_exp[r] + ps.log_z[r])).exp();
        }
    }
    if kinds[3] {
        // Tail integrals behind S_r = int_r (f'' e_s^2 + f' e_s (K_s - K_r)).
        let mut v_psi = vec![0.0; n + 1];
        let mut v_lam = vec![0.0; n + 1];
        let mut v_phi = vec![0.0; n + 1];
        for s in 0..=n {
            let t = ps.time(s);
            let f1 = p.f1(t, ps.x[s]).unwrap_or(0.0);
            let f2 = p.f2(t, ps.x[s]).unwrap_or(0.0);
            v_psi[s] = f2 * e[s] * e[s];
            v_lam[s] = f1 * e[s] * k[s];
            v_phi[s] = f1 * e[s];
        }
        let psi = suffix_trapezoid(&v_psi, ps.h);
        let lam = suffix_trapezoid(&v_lam, ps.h);
        let phi = suffix_trapezoid(&v_phi, ps.h);
        for r in 0..=n {
            out[r][3] = (psi[r] + lam[r] - k[r] * phi[r]) / (e[r] * e[r]);
        }
    }
}

fn branching_projection(
    p: &Problem,
    eps: f64,
    sk: &Skeleton,
    ns: &NoiseStream,
    outer: usize,
    inner: usize,
    bins: usize,
) -> Result<ConditionalProjection, FunctionalError> {
    if outer == 0 || inner == 0 {
        return Err(FunctionalError::TooFewSamples { got: 0, need: 1 });
    }
    let n = sk.intervals();
    let h = sk.step();
    let branch_ns = ns.substream(0xb7a2_c4d1);
    let mut ps = simulate_sde(p, eps, ns, 0, sk)?;
    let mut pairs: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(outer); n + 1];
    for path in 0..outer {
        simulate_sde_into(p, eps, ns, path as u64, sk, &mut ps)?;
        for r in 0..=n {
            let avg = if r == n {
                1.0
            } else {
                let base = (path * (n + 1) + r) as u64 * inner as u64;
                let total: f64 = (0..inner as u64)
                    .map(|m| continue_flow(p, eps, h, n, r, ps.x[r], &branch_ns, base + m).0)
                    .sum();
                total / inner as f64
            };
            pairs[r].push((ps.x[r], avg));
        }
    }
    Ok(bin_pairs(n, ProjMethod::Branching, &mut pairs, bins))
}

/// Quantile-edge binning with the rightward under-50 merge, for
/// pre-collected (x, response) pairs.
fn bin_pairs(
    n: usize,
    method: ProjMethod,
    pairs: &mut [Vec<(f64, f64)>],
    bins: usize,
) -> ConditionalProjection {
    let bins = bins.max(1);
    let mut bounds = Vec::with_capacity(n + 1);
    let mut means = Vec::with_capacity(n + 1);
    let mut counts = Vec::with_capacity(n + 1);
    for row in pairs.iter_mut() {
        row.sort_by(|a, b| a.0.total_cmp(&b.0));
        let xs: Vec<f64> = row.iter().map(|p| p.0).collect();
        let edges: Vec<f64> = (0..=bins)
            .map(|j| quantile_sorted(&xs, j as f64 / bins as f64))
            .collect();
        let inner = &edges[1..bins];
        let mut sums = vec![0.0f64; bins];
        let mut cnts = vec![0u32; bins];
        for &(x, resp) in row.iter() {
            let cell = inner.partition_point(|&e| e <= x);
            sums[cell] += resp;
            cnts[cell] += 1;
        }
        let mut cell_bounds = Vec::new();
        let mut cell_means = Vec::new();
        let mut cell_counts = Vec::new();
        let (mut acc, mut cnt) = (0.0f64, 0u32);
        for cell in 0..bins {
            acc += sums[cell];
            cnt += cnts[cell];
            if cnt >= MIN_CELL && cell + 1 < bins {
                cell_means.push(acc / cnt as f64);
                cell_counts.push(cnt);
                cell_bounds.push(edges[cell + 1]);
                acc = 0.0;
                cnt = 0;
            }
        }
        if cnt >= MIN_CELL || cell_means.is_empty() {
            cell_means.push(if cnt > 0 { acc / cnt as f64 } else { 0.0 });
            cell_counts.push(cnt);
        } else {
            let last = cell_means.len() - 1;
            cell_bounds.pop();
            let merged = cell_means[last] * cell_counts[last] as f64 + acc;
            cell_counts[last] += cnt;
            cell_means[last] = merged / cell_counts[last] as f64;
        }
        bounds.push(cell_bounds);
        means.push(cell_means);
        counts.push(cell_counts);
    }
    ConditionalProjection {
        n,
        method,
        bounds,
        means,
        counts,
        fallbacks: AtomicU64::new(0),
    }
}

/// Theta and the squared norm of the projected integrand. `d1` must be
/// the rescaled-fluctuation field (the state field scaled by 1/eps).
pub fn theta(
    ps: &PathState,
    d1: &DerivativeField,
    proj: &ConditionalProjection,
) -> Result<(f64, f64), FunctionalError> {
    let n = ps.n();
    let w = quad::simpson_weights(n, ps.h)?;
    let mut th = 0.0;
    let mut un = 0.0;
    for r in 0..=n {
        let u = ps.sigma_at[r] * proj.g(r, ps.x[r]);
        th += w[r] * d1.get(r, n) * u;
        un += w[r] * u * u;
    }
    Ok((th, un))
}

/// <D Theta, u> and ||D Theta||^2 from the rescaled fields. The theta
/// derivative at node theta combines the second-derivative row against
/// u with the projected second derivative against the first-derivative
/// end column (the latter restricted to r >= theta, where conditioning
/// keeps the factor adapted).
///
/// Valid when the diffusion derivatives vanish; the projected second
/// derivative then factors through the curvature table `proj2`.
pub fn theta_gradient(
    ps: &PathState,
    d1: &DerivativeField,
    d2: &SecondDerivativeField,
    proj: &ConditionalProjection,
    proj2: &ConditionalProjection,
) -> Result<(f64, f64), FunctionalError> {
    let n = ps.n();
    let w = quad::simpson_weights(n, ps.h)?;
    let e: Vec<f64> = ps.drift_exp.iter().map(|a| a.exp()).collect();
    let u: Vec<f64> = (0..=n)
        .map(|r| ps.sigma_at[r] * proj.g(r, ps.x[r]))
        .collect();
    // Tail integral for the conditioned term.
    let vals: Vec<f64> = (0..=n)
        .map(|r| d1.get(r, n) * e[r] * ps.sigma_at[r] * proj2.g(r, ps.x[r]))
        .collect();
    let suffix = suffix_trapezoid(&vals, ps.h);
    let mut du = 0.0;
    let mut norm2 = 0.0;
    for th in 0..=n {
        let row = d2.row(th);
        let mut t1 = 0.0;
        for r in 0..=n {
            t1 += w[r] * row[r] * u[r];
        }
        let t2 = ps.eps * ps.sigma_at[th] / e[th] * suffix[th];
        let dth = t1 + t2;
        du += w[th] * dth * u[th];
        norm2 += w[th] * dth * dth;
    }
    Ok((du, norm2))
}

/// Per-path record of the functionals entering the distance bounds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MalliavinSample {
    pub path_id: u64,
    pub f: f64,
    pub theta: f64,
    pub u_norm2: f64,
    pub dtheta_u: f64,
    pub dtheta_norm2: f64,
}

/// Full per-path evaluation for the state fluctuation, computed from
/// the cumulative arrays without materializing derivative fields; it
/// agrees with the field-based `theta`/`theta_gradient` path to
/// floating-point roundoff. `baseline_end` is the drift-only chain's
/// final value on the same mesh.
pub fn state_sample(
    p: &Problem,
    ps: &PathState,
    baseline_end: f64,
    projs: &ProjectionSet,
    with_gradient: bool,
) -> Result<MalliavinSample, FunctionalError> {
    let n = ps.n();
    let w = quad::simpson_weights(n, ps.h)?;
    let f = (ps.end_value() - baseline_end) / ps.eps;
    let mut d1end = vec![0.0; n + 1];
    let mut u = vec![0.0; n + 1];
    let mut theta = 0.0;
    let mut unorm = 0.0;
    for r in 0..=n {
        d1end[r] = ps.sigma_at[r] * ps.flow_factor(r, n);
        u[r] = ps.sigma_at[r] * projs.state.g(r, ps.x[r]);
        theta += w[r] * d1end[r] * u[r];
        unorm += w[r] * u[r] * u[r];
    }
    let (mut du, mut norm2) = (0.0, 0.0);
    if with_gradient {
        let proj2 = projs
            .state_curv
            .as_ref()
            .ok_or(FunctionalError::MissingProjection("state curvature"))?;
        let (e, k) = growth_and_curvature(p, ps);
        // Splits of the full-range quadrature keep the Simpson weights;
        // the conditioned term is a genuine tail integral.
        let mut prefix = vec![0.0; n + 2];
        for r in 0..=n {
            prefix[r + 1] = prefix[r] + w[r] * ps.sigma_at[r] * u[r] / e[r];
        }
        let mut q = vec![0.0; n + 2];
        for r in (0..=n).rev() {
            q[r] = q[r + 1] + w[r] * ps.sigma_at[r] * u[r] * (k[n] - k[r]) / e[r];
        }
        let vals: Vec<f64> = (0..=n)
            .map(|r| d1end[r] * e[r] * ps.sigma_at[r] * proj2.g(r, ps.x[r]))
            .collect();
        let t2s = suffix_trapezoid(&vals, ps.h);
        for th in 0..=n {
            let t1 = ps.eps * ps.sigma_at[th] * e[n] / e[th]
                * ((k[n] - k[th]) * prefix[th] + q[th]);
            let t2 = ps.eps * ps.sigma_at[th] / e[th] * t2s[th];
            let dth = t1 + t2;
            du += w[th] * dth * u[th];
            norm2 += w[th] * dth * dth;
        }
    }
    Ok(MalliavinSample {
        path_id: ps.path_id,
        f,
        theta,
        u_norm2: unorm,
        dtheta_u: du,
        dtheta_norm2: norm2,
    })
}

/// First derivative of the rescaled additive observable, D_r Y-tilde,
/// over the r-grid: the Simpson tail sum of f'(s, X_s) D_s X-tilde.
pub fn additive_first_derivative(
    p: &Problem,
    ps: &PathState,
) -> Result<Vec<f64>, FunctionalError> {
    if !p.has_observable() {
        return Err(FunctionalError::MissingObservable);
    }
    let n = ps.n();
    let vals: Vec<f64> = (0..=n)
        .map(|s| {
            p.f1(ps.time(s), ps.x[s]).unwrap() * (ps.drift_exp[s] + ps.log_z[s]).exp()
        })
        .collect();
    let mut out = suffix_trapezoid(&vals, ps.h);
    for r in 0..=n {
        out[r] *= ps.sigma_at[r] * (-(ps.drift_exp[r] + ps.log_z[r])).exp();
    }
    Ok(out)
}

/// Simpson value of f along a state curve, used to center the additive
/// observable at its drift-only value.
pub fn observable_baseline(
    p: &Problem,
    curve: &[f64],
    h: f64,
) -> Result<f64, FunctionalError> {
    if !p.has_observable() {
        return Err(FunctionalError::MissingObservable);
    }
    let vals: Vec<f64> = curve
        .iter()
        .enumerate()
        .map(|(i, &x)| p.f(h * i as f64, x).unwrap())
        .collect();
    Ok(quad::simpson(&vals, h)?)
}

/// Per-path evaluation for the additive observable: Theta and gradient
/// functionals of Y-tilde, mirroring `state_sample`. The second
/// derivative of Y is reconstructed from the growth and curvature
/// cumulants, so the gradient half needs vanishing diffusion
/// derivatives.
pub fn additive_fields(
    p: &Problem,
    ps: &PathState,
    obs_baseline_end: f64,
    projs: &ProjectionSet,
    with_gradient: bool,
) -> Result<MalliavinSample, FunctionalError> {
    if !p.has_observable() {
        return Err(FunctionalError::MissingObservable);
    }
    let n = ps.n();
    let w = quad::simpson_weights(n, ps.h)?;
    let proj_obs = projs
        .obs
        .as_ref()
        .ok_or(FunctionalError::MissingProjection("observable flow"))?;

    // Observable value and first derivative curve.
    let mut y = 0.0;
    for s in 0..=n {
        y += w[s] * p.f(ps.time(s), ps.x[s]).unwrap();
    }
    let f = (y - obs_baseline_end) / ps.eps;
    let dy = additive_first_derivative(p, ps)?;

    let mut u = vec![0.0; n + 1];
    let mut theta = 0.0;
    let mut unorm = 0.0;
    for r in 0..=n {
        u[r] = ps.sigma_at[r] * proj_obs.g(r, ps.x[r]);
        theta += w[r] * dy[r] * u[r];
        unorm += w[r] * u[r] * u[r];
    }

    let (mut du, mut norm2) = (0.0, 0.0);
    if with_gradient {
        if !gradient_supported(p) {
            return Err(FunctionalError::UnsupportedDiffusion {
                label: p.label().to_string(),
            });
        }
        let proj2 = projs
            .obs_curv
            .as_ref()
            .ok_or(FunctionalError::MissingProjection("observable curvature"))?;
        let (e, k) = growth_and_curvature(p, ps);
        // S_m = int_m (f'' e_s^2 + f' e_s (K_s - K_m)), via tail integrals.
        let mut v_psi = vec![0.0; n + 1];
        let mut v_lam = vec![0.0; n + 1];
        let mut v_phi = vec![0.0; n + 1];
        for s in 0..=n {
            let t = ps.time(s);
            let f1 = p.f1(t, ps.x[s]).unwrap();
            v_psi[s] = p.f2(t, ps.x[s]).unwrap() * e[s] * e[s];
            v_lam[s] = f1 * e[s] * k[s];
            v_phi[s] = f1 * e[s];
        }
        let psi = suffix_trapezoid(&v_psi, ps.h);
        let lam = suffix_trapezoid(&v_lam, ps.h);
        let phi = suffix_trapezoid(&v_phi, ps.h);
        let s_arr: Vec<f64> = (0..=n)
            .map(|m| psi[m] + lam[m] - k[m] * phi[m])
            .collect();
        let mut prefix = vec![0.0; n + 2];
        for r in 0..=n {
            prefix[r + 1] = prefix[r] + w[r] * ps.sigma_at[r] * u[r] / e[r];
        }
        let mut q = vec![0.0; n + 2];
        for r in (0..=n).rev() {
            q[r] = q[r + 1] + w[r] * ps.sigma_at[r] * u[r] * s_arr[r] / e[r];
        }
        let vals: Vec<f64> = (0..=n)
            .map(|r| dy[r] * e[r] * ps.sigma_at[r] * proj2.g(r, ps.x[r]))
            .collect();
        let t2s = suffix_trapezoid(&vals, ps.h);
        for th in 0..=n {
            let t1 = ps.eps * ps.sigma_at[th] / e[th] * (s_arr[th] * prefix[th] + q[th]);
            let t2 = ps.eps * ps.sigma_at[th] / e[th] * t2s[th];
            let dth = t1 + t2;
            du += w[th] * dth * u[th];
            norm2 += w[th] * dth * dth;
        }
    }
    Ok(MalliavinSample {
        path_id: ps.path_id,
        f,
        theta,
        u_norm2: unorm,
        dtheta_u: du,
        dtheta_norm2: norm2,
    })
}

/// Negative-moment estimate with honesty diagnostics: the headline
/// number is untrimmed; the trimmed variant and tail shares expose
/// Monte Carlo fragility instead of hiding it.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NegativeMomentReport {
    pub estimate: f64,
    pub trimmed: f64,
    pub jackknife_se: f64,
    pub top5_share: f64,
}

pub fn negative_moment(samples: &[f64], p0: f64) -> Result<NegativeMomentReport, FunctionalError> {
    if p0 <= 0.0 {
        return Err(FunctionalError::BadExponent(p0));
    }
    if samples.is_empty() {
        return Err(FunctionalError::TooFewSamples { got: 0, need: 1 });
    }
    if let Some((index, &value)) = samples.iter().enumerate().find(|(_, &s)| s <= 0.0) {
        return Err(FunctionalError::NonpositiveSample { index, value });
    }
    let contribs: Vec<f64> = samples.iter().map(|s| s.powf(-p0)).collect();
    let estimate = mean(&contribs);
    let jackknife_se = jackknife_se_mean(&contribs);
    let mut sorted = contribs.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    let top5: f64 = sorted.iter().take(5).sum();
    let top5_share = if total > 0.0 { top5 / total } else { 0.0 };
    let drop = ((samples.len() as f64 * 0.001).ceil() as usize).min(sorted.len() - 1);
    let trimmed = mean(&sorted[drop..]);
    Ok(NegativeMomentReport {
        estimate,
        trimmed,
        jackknife_se,
        top5_share,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct VolterraRow {
    pub t: f64,
    pub plain: f64,
    pub plain_se: f64,
    pub quadratic: f64,
    pub quadratic_se: f64,
}

/// Negative moments of the diffusion energy against the flat kernel and
/// the squared-lag kernel across horizons, with log-log slope fits. The
/// expected decays are -p0 and -3 p0.
#[derive(Debug, Clone, Serialize)]
pub struct VolterraCheck {
    pub p0: f64,
    pub rows: Vec<VolterraRow>,
    pub slope_plain: f64,
    pub slope_quadratic: f64,
}

pub fn volterra_negative_moment_check(
    p: &Problem,
    eps: f64,
    p0: f64,
    t_list: &[f64],
    paths: usize,
    n: usize,
    ns: &NoiseStream,
) -> Result<VolterraCheck, FunctionalError> {
    if p.sigma(0.0, p.x0()) == 0.0 {
        return Err(FunctionalError::DiffusionVanishesAtStart);
    }
    if t_list.len() < 2 || t_list.windows(2).any(|w| w[1] <= w[0]) || t_list[0] <= 0.0 {
        return Err(FunctionalError::BadHorizonList);
    }
    let mut rows = Vec::with_capacity(t_list.len());
    for (ti, &t) in t_list.iter().enumerate() {
        let pt = p.clone().with_horizon(t)?;
        let sk = crate::skeleton::solve_skeleton(&pt, n)?;
        let stream = ns.substream(ti as u64);
        let h = sk.step();
        let mut ps = simulate_sde(&pt, eps, &stream, 0, &sk)?;
        let mut plain = Vec::with_capacity(paths);
        let mut quadratic = Vec::with_capacity(paths);
        let mut vals = vec![0.0; n + 1];
        let mut vals_q = vec![0.0; n + 1];
        for path in 0..paths {
            simulate_sde_into(&pt, eps, &stream, path as u64, &sk, &mut ps)?;
            for i in 0..=n {
                let s2 = ps.sigma_at[i] * ps.sigma_at[i];
                let lag = t - ps.time(i);
                vals[i] = s2;
                vals_q[i] = lag * lag * s2;
            }
            plain.push(quad::simpson(&vals, h)?);
            quadratic.push(quad::simpson(&vals_q, h)?);
        }
        let plain_nm = negative_moment(&plain, p0)?;
        let quad_nm = negative_moment(&quadratic, p0)?;
        rows.push(VolterraRow {
            t,
            plain: plain_nm.estimate,
            plain_se: plain_nm.jackknife_se,
            quadratic: quad_nm.estimate,
            quadratic_se: quad_nm.jackknife_se,
        });
    }
    let log_t: Vec<f64> = rows.iter().map(|r| r.t.ln()).collect();
    let log_plain: Vec<f64> = rows.iter().map(|r| r.plain.ln()).collect();
    let log_quad: Vec<f64> = rows.iter().map(|r| r.quadratic.ln()).collect();
    let slope_plain = fit_line(&log_t, &log_plain)?.slope;
    let slope_quadratic = fit_line(&log_t, &log_quad)?.slope;
    Ok(VolterraCheck {
        p0,
        rows,
        slope_plain,
        slope_quadratic,
    })
}

/// CSV export of a sample ensemble, one row per path.
pub fn write_samples_csv(
    samples: &[MalliavinSample],
    w: &mut impl Write,
) -> io::Result<()> {
    writeln!(w, "path_id,F,theta,u_norm2,dtheta_u,dtheta_norm2")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.path_id, s.f, s.theta, s.u_norm2, s.dtheta_u, s.dtheta_norm2
        )?;
    }
    Ok(())
}
