//! Quadrature rules on uniform grids.
//!
//! Everything downstream integrates sampled values on uniform meshes, so the
//! rules here work on slices of samples rather than closures. Composite
//! Simpson is the default; trapezoid is kept as a cheaper cross-check.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuadError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("composite Simpson needs an even interval count, got {intervals}")]
    OddIntervalCount { intervals: usize },
}

/// Quadrature rule selector for the public integration entry points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Trapezoid,
    Simpson,
}

/// Composite trapezoid rule over uniformly spaced samples.
pub fn trapezoid(values: &[f64], h: f64) -> Result<f64, QuadError> {
    if values.len() < 2 {
        return Err(QuadError::TooFewSamples { min: 2, got: values.len() });
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    Ok(h * (0.5 * (values[0] + values[values.len() - 1]) + inner))
}

/// Composite Simpson rule; requires an even number of intervals.
pub fn simpson(values: &[f64], h: f64) -> Result<f64, QuadError> {
    let n = values.len();
    if n < 3 {
        return Err(QuadError::TooFewSamples { min: 3, got: n });
    }
    if (n - 1) % 2 != 0 {
        return Err(QuadError::OddIntervalCount { intervals: n - 1 });
    }
    let mut s4 = 0.0;
    let mut s2 = 0.0;
    for (i, v) in values[1..n - 1].iter().enumerate() {
        if i % 2 == 0 {
            s4 += v;
        } else {
            s2 += v;
        }
    }
    Ok(h / 3.0 * (values[0] + values[n - 1] + 4.0 * s4 + 2.0 * s2))
}

/// Integrate sampled values with the selected rule.
pub fn integrate(rule: Rule, values: &[f64], h: f64) -> Result<f64, QuadError> {
    match rule {
        Rule::Trapezoid => trapezoid(values, h),
        Rule::Simpson => simpson(values, h),
    }
}

/// Cumulative Simpson integral: entry `k` approximates the integral from the
/// first node to node `k`. Even-indexed entries are plain composite Simpson;
/// odd-indexed entries add one asymmetric three-point step, which keeps the
/// whole table fourth-order accurate.
pub fn cumulative_simpson(values: &[f64], h: f64) -> Result<Vec<f64>, QuadError> {
    let n = values.len();
    if n < 3 {
        return Err(QuadError::TooFewSamples { min: 3, got: n });
    }
    let mut out = vec![0.0; n];
    for k in (2..n).step_by(2) {
        out[k] = out[k - 2] + h / 3.0 * (values[k - 2] + 4.0 * values[k - 1] + values[k]);
    }
    for k in (1..n).step_by(2) {
        if k + 1 < n {
            out[k] = out[k - 1] + h / 12.0 * (5.0 * values[k - 1] + 8.0 * values[k] - values[k + 1]);
        } else {
            out[k] = out[k - 1] + h / 12.0 * (-values[k - 3] + 8.0 * values[k - 1] + 5.0 * values[k]);
        }
    }
    Ok(out)
}

/// Composite Simpson weights (including the `h/3` factor), so weighted sums
/// over sampled integrands can run as plain dot products in hot loops.
pub fn simpson_weights(intervals: usize, h: f64) -> Result<Vec<f64>, QuadError> {
    if intervals < 2 {
        return Err(QuadError::TooFewSamples { min: 3, got: intervals + 1 });
    }
    if intervals % 2 != 0 {
        return Err(QuadError::OddIntervalCount { intervals });
    }
    let mut w = vec![0.0; intervals + 1];
    w[0] = h / 3.0;
    w[intervals] = h / 3.0;
    for (i, wi) in w[1..intervals].iter_mut().enumerate() {
        *wi = if i % 2 == 0 { 4.0 * h / 3.0 } else { 2.0 * h / 3.0 };
    }
    Ok(w)
}
