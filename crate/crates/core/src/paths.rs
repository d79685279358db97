//! Path engine: Euler chains, derivative fields, and the limit pair.
//!
//! Everything here is a pure function of (problem, epsilon, master seed,
//! path id, mesh), so ensembles can be distributed over threads freely and
//! reduced in a fixed order. Per-path fields are dense in the mesh size and
//! are meant to be consumed and dropped path by path, never stored per
//! ensemble.

use crate::noise::NoiseStream;
use crate::problem::Problem;
use crate::quad;
use crate::skeleton::{drift_exponent, Skeleton};
use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("epsilon must lie in [0, 1), got {0}")]
    EpsilonRange(f64),
    #[error("state became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("mesh size must be even and at least 2, got {0}")]
    BadMesh(usize),
}

/// One simulated path with the cumulative integrals every derivative field
/// needs. Arrays are indexed by grid node, 0 ..= n.
#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub eps: f64,
    pub h: f64,
    pub path_id: u64,
    /// Euler states X_i, length n + 1.
    pub x: Vec<f64>,
    /// Brownian increments, length n.
    pub incr: Vec<f64>,
    /// Left-Riemann cumulative of b'(t, X_t) dt, length n + 1 starting at 0.
    pub drift_exp: Vec<f64>,
    /// Cumulative log of the diffusion-derivative exponential martingale:
    /// eps sigma'(t_j, X_j) dB_j - eps^2 sigma'^2 h / 2, length n + 1.
    pub log_z: Vec<f64>,
    /// sigma(t_i, X_i) at every node, length n + 1.
    pub sigma_at: Vec<f64>,
}

impl PathState {
    pub fn n(&self) -> usize {
        self.incr.len()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.h * i as f64
    }

    pub fn end_value(&self) -> f64 {
        *self.x.last().unwrap()
    }

    /// Exponential martingale Z over [r, t]; Z(r, r) = 1 by construction.
    #[inline]
    pub fn z(&self, r: usize, t: usize) -> f64 {
        (self.log_z[t] - self.log_z[r]).exp()
    }

    /// Linearized growth factor e^{int_r^t b'(u, X_u) du} along the path.
    #[inline]
    pub fn growth(&self, r: usize, t: usize) -> f64 {
        (self.drift_exp[t] - self.drift_exp[r]).exp()
    }

    /// Combined factor e^{int b'} Z, the path-dependent part of the closed
    /// first-derivative form.
    #[inline]
    pub fn flow_factor(&self, r: usize, t: usize) -> f64 {
        (self.drift_exp[t] + self.log_z[t] - self.drift_exp[r] - self.log_z[r]).exp()
    }

    fn alloc(n: usize) -> PathState {
        PathState {
            eps: 0.0,
            h: 0.0,
            path_id: 0,
            x: vec![0.0; n + 1],
            incr: vec![0.0; n],
            drift_exp: vec![0.0; n + 1],
            log_z: vec![0.0; n + 1],
            sigma_at: vec![0.0; n + 1],
        }
    }
}

/// Euler scheme for the small-noise SDE, filling `out` in place. `out` must
/// come from a previous simulation at the same mesh size or from
/// `simulate_sde`.
pub fn simulate_sde_into(
    p: &Problem,
    eps: f64,
    ns: &NoiseStream,
    path_id: u64,
    sk: &Skeleton,
    out: &mut PathState,
) -> Result<(), PathError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(PathError::EpsilonRange(eps));
    }
    let n = sk.intervals();
    if n < 2 || n % 2 != 0 {
        return Err(PathError::BadMesh(n));
    }
    let h = sk.step();
    assert_eq!(out.incr.len(), n, "scratch allocated at a different mesh");
    out.eps = eps;
    out.h = h;
    out.path_id = path_id;
    ns.fill_increments(path_id, h, &mut out.incr);
    let mut x = p.x0();
    out.x[0] = x;
    out.drift_exp[0] = 0.0;
    out.log_z[0] = 0.0;
    for i in 0..n {
        let t = h * i as f64;
        let s = p.sigma(t, x);
        let s1 = p.sigma1(t, x);
        out.sigma_at[i] = s;
        out.drift_exp[i + 1] = out.drift_exp[i] + p.b1(t, x) * h;
        out.log_z[i + 1] =
            out.log_z[i] + eps * s1 * out.incr[i] - 0.5 * eps * eps * s1 * s1 * h;
        x += p.b(t, x) * h + eps * s * out.incr[i];
        if !x.is_finite() {
            return Err(PathError::NonFinite { step: i + 1 });
        }
        out.x[i + 1] = x;
    }
    out.sigma_at[n] = p.sigma(h * n as f64, x);
    Ok(())
}

pub fn simulate_sde(
    p: &Problem,
    eps: f64,
    ns: &NoiseStream,
    path_id: u64,
    sk: &Skeleton,
) -> Result<PathState, PathError> {
    let mut ps = PathState::alloc(sk.intervals());
    simulate_sde_into(p, eps, ns, path_id, sk, &mut ps)?;
    Ok(ps)
}

/// Noise-free Euler chain on the same mesh: the exact eps -> 0 limit of the
/// scheme, used to center fluctuations without mixing discretizations.
pub fn drift_baseline(p: &Problem, n: usize, horizon: f64) -> Vec<f64> {
    let h = horizon / n as f64;
    let mut out = Vec::with_capacity(n + 1);
    let mut x = p.x0();
    out.push(x);
    for i in 0..n {
        x += p.b(h * i as f64, x) * h;
        out.push(x);
    }
    out
}

/// Exact variance profile of the linearized Euler fluctuation chain around
/// the drift baseline: the mesh-level analogue of the limit variance curve,
/// length n + 1. Entry n is the variance the simulated rescaled fluctuation
/// converges to as eps -> 0 at this fixed mesh.
pub fn euler_fluctuation_variance(p: &Problem, baseline: &[f64], h: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(baseline.len());
    v.push(0.0);
    let mut cur = 0.0;
    for (i, &e) in baseline[..baseline.len() - 1].iter().enumerate() {
        let t = h * i as f64;
        let a = 1.0 + h * p.b1(t, e);
        let s = p.sigma(t, e);
        cur = a * a * cur + s * s * h;
        v.push(cur);
    }
    v
}

/// Exact variance profile of the linearized observable chain
/// Y_{i+1} = Y_i + f(t_i, X_i) h around its baseline, length n + 1.
pub fn euler_observable_variance(p: &Problem, baseline: &[f64], h: f64) -> Option<Vec<f64>> {
    if !p.has_observable() {
        return None;
    }
    let mut out = Vec::with_capacity(baseline.len());
    out.push(0.0);
    let (mut v, mut c, mut w) = (0.0f64, 0.0f64, 0.0f64);
    for (i, &e) in baseline[..baseline.len() - 1].iter().enumerate() {
        let t = h * i as f64;
        let a = 1.0 + h * p.b1(t, e);
        let s = p.sigma(t, e);
        let f1 = p.f1(t, e).unwrap();
        w += 2.0 * f1 * h * c + f1 * f1 * h * h * v;
        c = a * (c + f1 * h * v);
        v = a * a * v + s * s * h;
        out.push(w);
    }
    Some(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivMethod {
    /// Evaluate the solved form eps sigma(r, X_r) e^{int_r^t b'} Z_{r,t}
    /// from the stored cumulative sums.
    ClosedForm,
    /// Euler-integrate the linear derivative recursion in t for each r,
    /// sharing the path's increments.
    Variational,
}

/// Lower-triangular first-derivative field d[r][t] = D_r X_{eps, t} for
/// grid nodes r <= t.
#[derive(Debug, Clone)]
pub struct DerivativeField {
    n: usize,
    pub method: DerivMethod,
    data: Vec<f64>,
}

impl DerivativeField {
    fn offset(&self, r: usize) -> usize {
        r * (self.n + 1) - r * r.saturating_sub(1) / 2
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Entry at (r, t); zero when r > t (nothing before the perturbation).
    #[inline]
    pub fn get(&self, r: usize, t: usize) -> f64 {
        if r > t {
            return 0.0;
        }
        self.data[self.offset(r) + (t - r)]
    }

    /// Row r as a slice over t = r ..= n.
    pub fn row(&self, r: usize) -> &[f64] {
        let o = self.offset(r);
        &self.data[o..o + (self.n + 1 - r)]
    }

    /// The column t = n: D_r X at the final time for every r.
    pub fn end_column(&self) -> Vec<f64> {
        (0..=self.n).map(|r| self.get(r, self.n)).collect()
    }

    /// Same field with every entry multiplied by `factor`, e.g. 1/eps to
    /// pass from the state derivative to the rescaled-fluctuation one.
    pub fn scale(&self, factor: f64) -> DerivativeField {
        DerivativeField {
            n: self.n,
            method: self.method,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// First Malliavin derivative field of the state, both constructions.
pub fn malliavin_first(p: &Problem, ps: &PathState, method: DerivMethod) -> DerivativeField {
    let n = ps.n();
    let len = (n + 1) * (n + 2) / 2;
    let mut data = vec![0.0; len];
    match method {
        DerivMethod::ClosedForm => {
            let mut k = 0;
            for r in 0..=n {
                let base = ps.eps * ps.sigma_at[r];
                let lr = ps.drift_exp[r] + ps.log_z[r];
                for t in r..=n {
                    data[k] = base * (ps.drift_exp[t] + ps.log_z[t] - lr).exp();
                    k += 1;
                }
            }
        }
        DerivMethod::Variational => {
            let mut mult = vec![0.0; n];
            for i in 0..n {
                let t = ps.h * i as f64;
                mult[i] = 1.0
                    + p.b1(t, ps.x[i]) * ps.h
                    + ps.eps * p.sigma1(t, ps.x[i]) * ps.incr[i];
            }
            let mut k = 0;
            for r in 0..=n {
                let mut w = ps.eps * ps.sigma_at[r];
                data[k] = w;
                k += 1;
                for i in r..n {
                    w *= mult[i];
                    data[k] = w;
                    k += 1;
                }
            }
        }
    }
    DerivativeField { n, method, data }
}

/// Full square second-derivative field d2[theta][r] = D_theta D_r X at the
/// final grid time. Symmetric by construction (mixed discrete partials of
/// the Euler chain commute).
#[derive(Debug, Clone)]
pub struct SecondDerivativeField {
    n: usize,
    data: Vec<f64>,
}

impl SecondDerivativeField {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, theta: usize, r: usize) -> f64 {
        self.data[theta * (self.n + 1) + r]
    }

    /// Row theta as a slice over r = 0 ..= n.
    pub fn row(&self, theta: usize) -> &[f64] {
        let o = theta * (self.n + 1);
        &self.data[o..o + self.n + 1]
    }

    pub fn max_symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for th in 0..=self.n {
            for r in 0..th {
                worst = worst.max((self.get(th, r) - self.get(r, th)).abs());
            }
        }
        worst
    }

    pub fn scale(&self, factor: f64) -> SecondDerivativeField {
        SecondDerivativeField {
            n: self.n,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Pointwise growth factors e_i = exp(drift_exp[i]) and the curvature
/// cumulant K_i = h sum_{j<i} b''(t_j, X_j) e_j. Shared by the reduced
/// second-derivative field and the gradient projections so both see the
/// same discrete integrals.
pub(crate) fn growth_and_curvature(p: &Problem, ps: &PathState) -> (Vec<f64>, Vec<f64>) {
    let n = ps.n();
    let e: Vec<f64> = ps.drift_exp.iter().map(|a| a.exp()).collect();
    let mut k = vec![0.0; n + 1];
    for i in 0..n {
        k[i + 1] = k[i] + ps.h * p.b2(ps.time(i), ps.x[i]) * e[i];
    }
    (e, k)
}

/// Second Malliavin derivative field at the final time. When the diffusion
/// derivatives vanish the reduced integral form fills the square in O(1)
/// per entry; otherwise each entry Euler-integrates its linear recursion
/// from max(theta, r), reusing the first-derivative triangle.
pub fn malliavin_second(
    p: &Problem,
    ps: &PathState,
    d1: &DerivativeField,
) -> SecondDerivativeField {
    let n = ps.n();
    let mut data = vec![0.0; (n + 1) * (n + 1)];
    let reduced = p.shortcuts.sigma_prime_zero && p.shortcuts.sigma_curvature_zero;
    if reduced {
        // d2[theta][r] = eps^2 s_th s_r e_n / (e_th e_r) (K_n - K_max).
        // This is exactly the left-Riemann integral of
        // b'' D_theta X D_r X e^{int_s^t b'} with the closed-form d1.
        let (e, k) = growth_and_curvature(p, ps);
        let e2 = ps.eps * ps.eps;
        for th in 0..=n {
            let pre = e2 * ps.sigma_at[th] / e[th] * e[n];
            for r in 0..=n {
                let m = th.max(r);
                data[th * (n + 1) + r] = pre * ps.sigma_at[r] / e[r] * (k[n] - k[m]);
            }
        }
    } else {
        for th in 0..=n {
            for r in th..=n {
                // Start at s = max: initial value eps sigma'(r, X_r) D_th X_r,
                // then the linear recursion with the b''/sigma'' source.
                let mut w = ps.eps * p.sigma1(ps.time(r), ps.x[r]) * d1.get(th, r);
                for i in r..n {
                    let t = ps.time(i);
                    let cross = d1.get(th, i) * d1.get(r, i);
                    w += (p.b2(t, ps.x[i]) * cross + p.b1(t, ps.x[i]) * w) * ps.h
                        + ps.eps
                            * (p.sigma2(t, ps.x[i]) * cross + p.sigma1(t, ps.x[i]) * w)
                            * ps.incr[i];
                }
                data[th * (n + 1) + r] = w;
                data[r * (n + 1) + th] = w;
            }
        }
    }
    SecondDerivativeField { n, data }
}

/// Continue a path from node `start` at state `x_start` to the final node
/// with fresh increments from `branch`, returning the accumulated
/// (e^{int b'} Z, Z) factors over [start, end]. Used by branching
/// conditional-expectation estimators and martingale diagnostics.
pub fn continue_flow(
    p: &Problem,
    eps: f64,
    h: f64,
    n: usize,
    start: usize,
    x_start: f64,
    ns: &NoiseStream,
    branch: u64,
) -> (f64, f64) {
    let mut x = x_start;
    let mut a = 0.0;
    let mut lz = 0.0;
    for i in start..n {
        let t = h * i as f64;
        let db = ns.gaussian(branch, i as u64) * h.sqrt();
        let s1 = p.sigma1(t, x);
        a += p.b1(t, x) * h;
        lz += eps * s1 * db - 0.5 * eps * eps * s1 * s1 * h;
        x += p.b(t, x) * h + eps * p.sigma(t, x) * db;
    }
    ((a + lz).exp(), lz.exp())
}

/// Deterministic ingredients of the limit pair, computed once per
/// (problem, mesh) and shared by every path: skeleton coefficient arrays,
/// the linearized flow, and the final-time derivative of the Gaussian part.
#[derive(Debug, Clone)]
pub struct LimitCoeffs {
    pub n: usize,
    pub h: f64,
    b1: Vec<f64>,
    b2: Vec<f64>,
    sigma: Vec<f64>,
    sigma1: Vec<f64>,
    /// e^{int_0^{t_i} b'(u, x_u) du} on coarse nodes.
    flow: Vec<f64>,
    /// du_end[r] = D_r U at the final time, deterministic.
    pub du_end: Vec<f64>,
}

pub fn limit_coeffs(p: &Problem, sk: &Skeleton) -> LimitCoeffs {
    let n = sk.intervals();
    let a = drift_exponent(p, sk);
    let mut b1 = Vec::with_capacity(n + 1);
    let mut b2 = Vec::with_capacity(n + 1);
    let mut sigma = Vec::with_capacity(n + 1);
    let mut sigma1 = Vec::with_capacity(n + 1);
    let mut flow = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = sk.coarse_time(i);
        let x = sk.coarse(i);
        b1.push(p.b1(t, x));
        b2.push(p.b2(t, x));
        sigma.push(p.sigma(t, x));
        sigma1.push(p.sigma1(t, x));
        flow.push(a[2 * i].exp());
    }
    let du_end = (0..=n).map(|r| sigma[r] * flow[n] / flow[r]).collect();
    LimitCoeffs { n, h: sk.step(), b1, b2, sigma, sigma1, flow, du_end }
}

/// One realization of the limit pair (U, V) with the final-time derivative
/// field of V. U is the Gaussian limit of the rescaled fluctuation; V is
/// the first correction, driven by drift curvature and diffusion slope.
#[derive(Debug, Clone)]
pub struct LimitPair {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// dv_end[r] = D_r V at the final time.
    pub dv_end: Vec<f64>,
}

pub fn simulate_limit_pair(c: &LimitCoeffs, ns: &NoiseStream, path_id: u64) -> LimitPair {
    let n = c.n;
    let mut incr = vec![0.0; n];
    ns.fill_increments(path_id, c.h, &mut incr);
    let mut u = Vec::with_capacity(n + 1);
    let mut v = Vec::with_capacity(n + 1);
    // cum[i] = sum_{j<i} (b'' U_j h + sigma' dB_j), the stochastic part of
    // the explicit D_r V formula.
    let mut cum = Vec::with_capacity(n + 1);
    u.push(0.0);
    v.push(0.0);
    cum.push(0.0);
    for i in 0..n {
        let (ui, vi) = (u[i], v[i]);
        u.push(ui + c.b1[i] * ui * c.h + c.sigma[i] * incr[i]);
        v.push(vi + (c.b1[i] * vi + 0.5 * c.b2[i] * ui * ui) * c.h + c.sigma1[i] * ui * incr[i]);
        cum.push(cum[i] + c.b2[i] * ui * c.h + c.sigma1[i] * incr[i]);
    }
    let dv_end = (0..=n)
        .map(|r| c.flow[n] / c.flow[r] * (c.sigma1[r] * u[r] + c.sigma[r] * (cum[n] - cum[r])))
        .collect();
    LimitPair { u, v, dv_end }
}

/// Skorokhod-integral functional V_T U_T - <DV, DU> for one realization;
/// its conditional mean given U_T drives the sharpness lower bound.
pub fn skorokhod_functional(c: &LimitCoeffs, lp: &LimitPair) -> f64 {
    let prods: Vec<f64> =
        (0..=c.n).map(|r| lp.dv_end[r] * c.du_end[r]).collect();
    let inner = quad::simpson(&prods, c.h).expect("even mesh");
    lp.v[c.n] * lp.u[c.n] - inner
}

const DUMP_MAGIC: &[u8; 4] = b"SNPS";
const DUMP_VERSION: u32 = 1;

/// Debug dump of one path: magic, version, n, eps, h, path id, then the
/// five arrays as little-endian doubles.
pub fn dump_path(ps: &PathState, w: &mut impl Write) -> io::Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(ps.n() as u64).to_le_bytes())?;
    w.write_all(&ps.eps.to_le_bytes())?;
    w.write_all(&ps.h.to_le_bytes())?;
    w.write_all(&ps.path_id.to_le_bytes())?;
    for arr in [&ps.x, &ps.incr, &ps.drift_exp, &ps.log_z, &ps.sigma_at] {
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_path_dump(r: &mut impl Read) -> io::Result<PathState> {
    let mut m4 = [0u8; 4];
    r.read_exact(&mut m4)?;
    if &m4 != DUMP_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad path dump magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != DUMP_VERSION {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "unsupported dump version"));
    }
    let mut b8 = [0u8; 8];
    let mut next = |r: &mut dyn Read| -> io::Result<[u8; 8]> {
        r.read_exact(&mut b8)?;
        Ok(b8)
    };
    let n = u64::from_le_bytes(next(r)?) as usize;
    let eps = f64::from_le_bytes(next(r)?);
    let h = f64::from_le_bytes(next(r)?);
    let path_id = u64::from_le_bytes(next(r)?);
    let mut arrays = Vec::new();
    for len in [n + 1, n, n + 1, n + 1, n + 1] {
        let mut a = Vec::with_capacity(len);
        for _ in 0..len {
            a.push(f64::from_le_bytes(next(r)?));
        }
        arrays.push(a);
    }
    let sigma_at = arrays.pop().unwrap();
    let log_z = arrays.pop().unwrap();
    let drift_exp = arrays.pop().unwrap();
    let incr = arrays.pop().unwrap();
    let x = arrays.pop().unwrap();
    Ok(PathState { eps, h, path_id, x, incr, drift_exp, log_z, sigma_at })
}
