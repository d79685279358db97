//! Deterministic core: the noise-free flow and the limit variances.
//!
//! The skeleton is the solution of dx/dt = b(t, x) from the initial point.
//! It is solved by classical RK4 on a refined grid with two steps per coarse
//! interval, so every quadrature below has the midpoints it needs for
//! composite Simpson rules. The limit variances of the rescaled fluctuation
//! and of a rescaled observable integral are time integrals along the
//! skeleton and are computed here to fourth order.

use crate::problem::Problem;
use crate::quad::{self, QuadError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("skeleton solver needs at least one interval")]
    NoIntervals,
    #[error("skeleton diverged to a non-finite value near t={t}")]
    NonFinite { t: f64 },
    #[error("problem has no observable integrand")]
    NoObservable,
    #[error(transparent)]
    Quad(#[from] QuadError),
}

/// Noise-free flow sampled on the refined (half-step) grid.
#[derive(Debug, Clone)]
pub struct Skeleton {
    n: usize,
    horizon: f64,
    h: f64,
    refined: Vec<f64>,
}

impl Skeleton {
    /// Number of coarse intervals.
    pub fn intervals(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Coarse step size.
    pub fn step(&self) -> f64 {
        self.h
    }

    /// Half of the coarse step: the spacing of the refined grid.
    pub fn refined_step(&self) -> f64 {
        0.5 * self.h
    }

    /// All 2n + 1 skeleton values on the refined grid.
    pub fn refined(&self) -> &[f64] {
        &self.refined
    }

    /// Skeleton value at coarse node i (0 ..= n).
    pub fn coarse(&self, i: usize) -> f64 {
        self.refined[2 * i]
    }

    pub fn end_value(&self) -> f64 {
        *self.refined.last().unwrap()
    }

    pub fn coarse_time(&self, i: usize) -> f64 {
        self.h * i as f64
    }

    pub fn refined_time(&self, j: usize) -> f64 {
        0.5 * self.h * j as f64
    }
}

/// Solve the skeleton ODE with RK4 over 2n half-steps.
pub fn solve_skeleton(p: &Problem, n: usize) -> Result<Skeleton, SkeletonError> {
    if n == 0 {
        return Err(SkeletonError::NoIntervals);
    }
    let h = p.horizon() / n as f64;
    let dt = 0.5 * h;
    let mut refined = Vec::with_capacity(2 * n + 1);
    let mut x = p.x0();
    refined.push(x);
    for j in 0..2 * n {
        let t = dt * j as f64;
        let k1 = p.b(t, x);
        let k2 = p.b(t + 0.5 * dt, x + 0.5 * dt * k1);
        let k3 = p.b(t + 0.5 * dt, x + 0.5 * dt * k2);
        let k4 = p.b(t + dt, x + dt * k3);
        x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !x.is_finite() {
            return Err(SkeletonError::NonFinite { t: t + dt });
        }
        refined.push(x);
    }
    Ok(Skeleton { n, horizon: p.horizon(), h, refined })
}

/// Cumulative integral of b'(t, x_t) along the skeleton, one entry per
/// refined node. This exponentiates to the linearized flow map.
pub fn drift_exponent(p: &Problem, s: &Skeleton) -> Vec<f64> {
    let dt = s.refined_step();
    let vals: Vec<f64> = s
        .refined
        .iter()
        .enumerate()
        .map(|(j, &x)| p.b1(dt * j as f64, x))
        .collect();
    quad::cumulative_simpson(&vals, dt).expect("refined grid has at least 3 nodes")
}

/// Limit variance of the rescaled state fluctuation at the horizon.
pub fn beta_variance(p: &Problem, s: &Skeleton) -> Result<f64, SkeletonError> {
    let a = drift_exponent(p, s);
    let dt = s.refined_step();
    let end = *a.last().unwrap();
    let vals: Vec<f64> = s
        .refined
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let sig = p.sigma(dt * j as f64, x);
            sig * sig * (2.0 * (end - a[j])).exp()
        })
        .collect();
    Ok(quad::simpson(&vals, dt)?)
}

/// Limit variance curve t_i -> beta_{t_i}^2 at the coarse nodes.
pub fn beta_curve(p: &Problem, s: &Skeleton) -> Result<Vec<f64>, SkeletonError> {
    let a = drift_exponent(p, s);
    let dt = s.refined_step();
    let vals: Vec<f64> = s
        .refined
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let sig = p.sigma(dt * j as f64, x);
            sig * sig * (-2.0 * a[j]).exp()
        })
        .collect();
    let cum = quad::cumulative_simpson(&vals, dt)?;
    Ok((0..=s.n).map(|i| (2.0 * a[2 * i]).exp() * cum[2 * i]).collect())
}

/// Limit variance of the rescaled observable integral at the horizon.
/// Needs the observable block; fails otherwise.
pub fn gamma_variance(p: &Problem, s: &Skeleton) -> Result<f64, SkeletonError> {
    let g = gamma_curve(p, s)?;
    Ok(*g.last().unwrap())
}

/// Limit variance curve t_i -> gamma_{t_i}^2 at the coarse nodes.
pub fn gamma_curve(p: &Problem, s: &Skeleton) -> Result<Vec<f64>, SkeletonError> {
    if !p.has_observable() {
        return Err(SkeletonError::NoObservable);
    }
    let a = drift_exponent(p, s);
    let dt = s.refined_step();
    let weighted: Vec<f64> = s
        .refined
        .iter()
        .enumerate()
        .map(|(j, &x)| p.f1(dt * j as f64, x).unwrap() * a[j].exp())
        .collect();
    let phi = quad::cumulative_simpson(&weighted, dt)?;
    let mut curve = Vec::with_capacity(s.n + 1);
    curve.push(0.0);
    let mut scratch = vec![0.0; 2 * s.n + 1];
    for i in 1..=s.n {
        for j in 0..=2 * i {
            let inner = (phi[2 * i] - phi[j]) * (-a[j]).exp();
            scratch[j] = inner * inner;
        }
        curve.push(quad::simpson(&scratch[..=2 * i], dt)?);
    }
    Ok(curve)
}

/// Render the skeleton and variance curves as CSV, one row per coarse node.
/// The gamma column is empty when the problem has no observable.
pub fn curves_to_csv(p: &Problem, s: &Skeleton) -> Result<String, SkeletonError> {
    let beta = beta_curve(p, s)?;
    let gamma = if p.has_observable() { Some(gamma_curve(p, s)?) } else { None };
    let mut out = String::from("t,x,beta2,gamma2\n");
    for i in 0..=s.n {
        let g = gamma.as_ref().map(|g| g[i].to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", s.coarse_time(i), s.coarse(i), beta[i], g));
    }
    Ok(out)
}
