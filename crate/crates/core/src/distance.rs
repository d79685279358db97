//! Distances to normality estimated from samples: Fisher information
//! distance through two score estimators (kernel regression of the
//! integration-by-parts response, and a direct density-derivative
//! estimate), the Kolmogorov distance with its DKW band, closed-form
//! Gaussian oracles, and the ordering check Kolmogorov <= sqrt(Fisher).

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::stats::{
    hashed_batch_mean, mean, nw_regress_sorted, quantile_sorted, silverman_bandwidth,
};

/// Default number of quantile knots for score tables.
pub const DEFAULT_KNOTS: usize = 128;
/// Density floor below which a KDE knot is discarded.
const DENSITY_FLOOR: f64 = 1e-12;
/// Central probability mass covered by the knot range.
const KNOT_COVERAGE: f64 = 0.99;

#[derive(Debug, Error)]
pub enum DistanceError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("samples are degenerate (zero spread)")]
    DegenerateSamples,
    #[error("theta must be positive, found {value} at sample {index}")]
    NonpositiveTheta { index: usize, value: f64 },
    #[error("non-finite input at sample {index}")]
    NonFinite { index: usize },
    #[error("target variance must be positive, got {0}")]
    BadTargetVariance(f64),
    #[error("score table is empty after dropping low-density knots")]
    EmptyScoreTable,
    #[error("no samples fall inside the score knot range")]
    NoSamplesInRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScoreMethod {
    Regression,
    Kde,
}

/// Piecewise-linear score estimate rho_hat on quantile knots.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreModel {
    pub method: ScoreMethod,
    knots: Vec<f64>,
    values: Vec<f64>,
    pub bandwidth: f64,
    pub n_effective: usize,
}

impl ScoreModel {
    /// Builds a model directly from a score table, for plugging analytic
    /// scores into the estimators. Knots must be strictly increasing.
    pub fn from_table(
        method: ScoreMethod,
        knots: Vec<f64>,
        values: Vec<f64>,
        n_effective: usize,
    ) -> Result<ScoreModel, DistanceError> {
        if knots.len() < 2 || knots.len() != values.len() {
            return Err(DistanceError::EmptyScoreTable);
        }
        if let Some(index) = knots
            .iter()
            .chain(values.iter())
            .position(|v| !v.is_finite())
        {
            return Err(DistanceError::NonFinite { index });
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DistanceError::EmptyScoreTable);
        }
        Ok(ScoreModel {
            method,
            knots,
            values,
            bandwidth: 0.0,
            n_effective,
        })
    }

    /// Evaluates the score by linear interpolation; `None` outside the
    /// knot range.
    pub fn eval(&self, x: f64) -> Option<f64> {
        let first = self.knots[0];
        let last = *self.knots.last().unwrap();
        if x < first || x > last {
            return None;
        }
        let idx = self.knots.partition_point(|&k| k <= x);
        if idx == 0 {
            return Some(self.values[0]);
        }
        if idx >= self.knots.len() {
            return Some(*self.values.last().unwrap());
        }
        let k0 = self.knots[idx - 1];
        let k1 = self.knots[idx];
        let frac = (x - k0) / (k1 - k0);
        Some(self.values[idx - 1] + frac * (self.values[idx] - self.values[idx - 1]))
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn knot_range(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }
}

/// Equal-probability knots over the central mass of the sorted sample,
/// deduplicated so the table is strictly increasing.
pub(crate) fn quantile_knots(sorted: &[f64], count: usize) -> Vec<f64> {
    let lo = (1.0 - KNOT_COVERAGE) / 2.0;
    let mut knots = Vec::with_capacity(count);
    for j in 0..count {
        let p = lo + KNOT_COVERAGE * j as f64 / (count - 1) as f64;
        let q = quantile_sorted(sorted, p);
        if knots.last().is_none_or(|&prev| q > prev) {
            knots.push(q);
        }
    }
    knots
}

fn check_ensemble(f: &[f64], need: usize) -> Result<(), DistanceError> {
    if f.len() < need {
        return Err(DistanceError::TooFewSamples {
            got: f.len(),
            need,
        });
    }
    if let Some(index) = f.iter().position(|x| !x.is_finite()) {
        return Err(DistanceError::NonFinite { index });
    }
    let first = f[0];
    if f.iter().all(|&x| x == first) {
        return Err(DistanceError::DegenerateSamples);
    }
    Ok(())
}

/// Score estimate from per-path responses R via Nadaraya-Watson
/// regression: rho_hat = -E[R | F = x] on quantile knots.
pub fn score_from_responses(
    f: &[f64],
    responses: &[f64],
    knot_count: usize,
    bandwidth_mult: f64,
) -> Result<ScoreModel, DistanceError> {
    check_ensemble(f, 1000)?;
    if let Some(index) = responses.iter().position(|r| !r.is_finite()) {
        return Err(DistanceError::NonFinite { index });
    }
    let mut pairs: Vec<(f64, f64)> = f.iter().copied().zip(responses.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let rs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let knots = quantile_knots(&xs, knot_count);
    if knots.len() < 2 {
        return Err(DistanceError::EmptyScoreTable);
    }
    let bandwidth = bandwidth_mult * silverman_bandwidth(&xs);
    let fitted = nw_regress_sorted(&xs, &rs, &knots, bandwidth);
    let values: Vec<f64> = fitted.iter().map(|m| -m).collect();
    Ok(ScoreModel {
        method: ScoreMethod::Regression,
        knots,
        values,
        bandwidth,
        n_effective: f.len(),
    })
}

/// Regression score estimator built from the pathwise functionals: the
/// response (F - mean F)/Theta + <D Theta, u>/Theta^2 has conditional
/// expectation equal to minus the score of F.
pub fn score_by_regression(
    f: &[f64],
    theta: &[f64],
    dtheta_u: &[f64],
) -> Result<ScoreModel, DistanceError> {
    assert_eq!(f.len(), theta.len());
    assert_eq!(f.len(), dtheta_u.len());
    if let Some((index, &value)) = theta.iter().enumerate().find(|(_, &th)| th <= 0.0) {
        return Err(DistanceError::NonpositiveTheta { index, value });
    }
    check_ensemble(f, 1000)?;
    let fbar = mean(f);
    let responses: Vec<f64> = f
        .iter()
        .zip(theta)
        .zip(dtheta_u)
        .map(|((&fi, &th), &du)| (fi - fbar) / th + du / (th * th))
        .collect();
    // Half-Silverman bandwidth: the response is already low-noise, and
    // the tighter kernel keeps curvature bias out of the O(eps^2) signal.
    score_from_responses(f, &responses, DEFAULT_KNOTS, 0.5)
}

/// Direct kernel score estimate p_hat'/p_hat on quantile knots. Knots
/// where the density falls under an absolute floor are dropped.
pub fn score_by_kde(samples: &[f64], bandwidth_mult: f64) -> Result<ScoreModel, DistanceError> {
    check_ensemble(samples, 1000)?;
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let bandwidth = bandwidth_mult * silverman_bandwidth(&xs);
    if bandwidth <= 0.0 {
        return Err(DistanceError::DegenerateSamples);
    }
    let raw_knots = quantile_knots(&xs, DEFAULT_KNOTS);
    let n = xs.len() as f64;
    let norm = (2.0 * std::f64::consts::PI).sqrt();
    let cut = 8.0 * bandwidth;
    let mut knots = Vec::with_capacity(raw_knots.len());
    let mut values = Vec::with_capacity(raw_knots.len());
    for &k in &raw_knots {
        let lo = xs.partition_point(|&x| x < k - cut);
        let hi = xs.partition_point(|&x| x <= k + cut);
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        for &x in &xs[lo..hi] {
            let z = (k - x) / bandwidth;
            let w = (-0.5 * z * z).exp();
            s0 += w;
            s1 += z * w;
        }
        let density = s0 / (n * bandwidth * norm);
        if density < DENSITY_FLOOR {
            continue;
        }
        knots.push(k);
        values.push(-s1 / (bandwidth * s0));
    }
    if knots.len() < 2 {
        return Err(DistanceError::EmptyScoreTable);
    }
    Ok(ScoreModel {
        method: ScoreMethod::Kde,
        knots,
        values,
        bandwidth,
        n_effective: samples.len(),
    })
}

/// Fisher distance estimate with its hashed-batch standard error and
/// the fraction of samples outside the knot range.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FisherEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub outside_fraction: f64,
}

/// Monte Carlo average of (rho_hat(F) + (F - mu)/sigma2)^2 over the
/// samples inside the knot range. Samples are sorted and batches are
/// assigned by hashing values, so the result is independent of input
/// order.
pub fn fisher_distance(
    sm: &ScoreModel,
    samples: &[f64],
    mu: f64,
    sigma2: f64,
) -> Result<FisherEstimate, DistanceError> {
    if sigma2 <= 0.0 {
        return Err(DistanceError::BadTargetVariance(sigma2));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let mut keys = Vec::with_capacity(xs.len());
    let mut vals = Vec::with_capacity(xs.len());
    for &x in &xs {
        if let Some(rho) = sm.eval(x) {
            let term = rho + (x - mu) / sigma2;
            keys.push(x);
            vals.push(term * term);
        }
    }
    if vals.is_empty() {
        return Err(DistanceError::NoSamplesInRange);
    }
    let (estimate, stderr) = hashed_batch_mean(&vals, &keys);
    Ok(FisherEstimate {
        estimate,
        stderr,
        outside_fraction: 1.0 - vals.len() as f64 / xs.len() as f64,
    })
}

/// Kolmogorov distance to N(mu, sigma2) with the two-sided evaluation
/// at empirical jump points, plus the 95% DKW band sqrt(ln(2/0.05)/2n).
pub fn kolmogorov_distance(
    samples: &[f64],
    mu: f64,
    sigma2: f64,
) -> Result<(f64, f64), DistanceError> {
    if sigma2 <= 0.0 {
        return Err(DistanceError::BadTargetVariance(sigma2));
    }
    if samples.is_empty() {
        return Err(DistanceError::TooFewSamples { got: 0, need: 1 });
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let normal = Normal::new(mu, sigma2.sqrt()).expect("positive sd");
    let n = xs.len() as f64;
    let mut sup: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let cdf = normal.cdf(x);
        let above = (i + 1) as f64 / n - cdf;
        let below = cdf - i as f64 / n;
        sup = sup.max(above).max(below);
    }
    let band = ((2.0f64 / 0.05).ln() / (2.0 * n)).sqrt();
    Ok((sup, band))
}

/// Fisher information distance between two Gaussians in closed form.
pub fn gaussian_fisher_closed(mu1: f64, var1: f64, mu2: f64, var2: f64) -> f64 {
    assert!(var1 > 0.0 && var2 > 0.0);
    let shift = (mu1 - mu2) * (mu1 - mu2) / (var2 * var2);
    let scale = 1.0 / var2 - 1.0 / var1;
    shift + var1 * scale * scale
}

/// Summary of one distance run against a Gaussian target.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceReport {
    pub n: usize,
    pub mu: f64,
    pub sigma2: f64,
    pub fisher: f64,
    pub fisher_se: f64,
    pub kolmogorov: f64,
    pub kolmogorov_band: f64,
    pub outside_fraction: f64,
    pub outside_warn: bool,
    pub method: ScoreMethod,
    pub bandwidth: f64,
    pub knot_count: usize,
}

/// Assembles a report from a fitted score model and a sample set.
pub fn build_report(
    sm: &ScoreModel,
    samples: &[f64],
    mu: f64,
    sigma2: f64,
) -> Result<DistanceReport, DistanceError> {
    let fisher = fisher_distance(sm, samples, mu, sigma2)?;
    let (kol, band) = kolmogorov_distance(samples, mu, sigma2)?;
    Ok(DistanceReport {
        n: samples.len(),
        mu,
        sigma2,
        fisher: fisher.estimate,
        fisher_se: fisher.stderr,
        kolmogorov: kol,
        kolmogorov_band: band,
        outside_fraction: fisher.outside_fraction,
        outside_warn: fisher.outside_fraction > 0.05,
        method: sm.method,
        bandwidth: sm.bandwidth,
        knot_count: sm.knots.len(),
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PinskerVerdict {
    pub pass: bool,
    pub slack: f64,
}

/// Checks the ordering Kolmogorov <= sqrt(Fisher) with a 95% allowance:
/// the Fisher estimate is inflated by 1.96 standard errors under the
/// root and the DKW band is added on the right.
pub fn pinsker_check(report: &DistanceReport) -> PinskerVerdict {
    let inflated = (report.fisher + 1.96 * report.fisher_se).max(0.0);
    let threshold = inflated.sqrt() + report.kolmogorov_band;
    let slack = threshold - report.kolmogorov;
    PinskerVerdict {
        pass: slack >= 0.0,
        slack,
    }
}
