//! Small statistics toolkit shared by the score estimators and the
//! experiment layer: moments, quantiles, kernel regression, and the
//! hashed batch standard errors that keep reported uncertainties
//! invariant under sample reordering.

use thiserror::Error;

use crate::noise::mix64;

/// Number of batches used for hashed batch standard errors.
pub const BATCHES: usize = 32;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("samples are degenerate (zero spread)")]
    Degenerate,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n-1 denominator).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Mean together with its plain standard error sd/sqrt(n).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let se = (variance(xs) / xs.len() as f64).sqrt();
    (m, se)
}

/// Sample variance with the large-sample standard error of the variance
/// estimator, sqrt((m4 - v^2)/n).
pub fn variance_and_se(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let v = variance(xs);
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / xs.len() as f64;
    (v, ((m4 - v * v).max(0.0) / xs.len() as f64).sqrt())
}

/// Linear-interpolation quantile on pre-sorted data (the common
/// "type 7" convention: h = (n-1)p).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&p));
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Silverman's rule-of-thumb bandwidth: 0.9 min(sd, IQR/1.34) n^(-1/5).
pub fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let sd = variance(sorted).sqrt();
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (sorted.len() as f64).powf(-0.2)
}

/// Nadaraya-Watson regression with a Gaussian kernel, evaluated at
/// `knots`. Inputs must be sorted by `xs`; the kernel is truncated at
/// eight bandwidths, which keeps the error far below sampling noise
/// while making the scan O(n + k * window).
pub fn nw_regress_sorted(xs: &[f64], rs: &[f64], knots: &[f64], bandwidth: f64) -> Vec<f64> {
    assert_eq!(xs.len(), rs.len());
    assert!(bandwidth > 0.0);
    let cut = 8.0 * bandwidth;
    knots
        .iter()
        .map(|&k| {
            let lo = xs.partition_point(|&x| x < k - cut);
            let hi = xs.partition_point(|&x| x <= k + cut);
            let mut num = 0.0;
            let mut den = 0.0;
            for i in lo..hi {
                let z = (k - xs[i]) / bandwidth;
                let w = (-0.5 * z * z).exp();
                num += w * rs[i];
                den += w;
            }
            if den > 0.0 {
                num / den
            } else {
                // Fall back to the nearest sample when the window is empty.
                let j = lo.min(xs.len() - 1);
                let j = if j > 0 && (k - xs[j - 1]).abs() < (xs[j] - k).abs() {
                    j - 1
                } else {
                    j
                };
                rs[j]
            }
        })
        .collect()
}

/// Mean and batch standard error where each value is assigned to one of
/// [`BATCHES`] batches by hashing its bit pattern. Equal inputs land in
/// equal batches, so the result does not depend on sample order once
/// the caller sorts (or otherwise fixes) the summation order.
pub fn hashed_batch_mean(values: &[f64], keys: &[f64]) -> (f64, f64) {
    assert_eq!(values.len(), keys.len());
    assert!(!values.is_empty());
    let mut sums = [0.0f64; BATCHES];
    let mut counts = [0usize; BATCHES];
    let mut total = 0.0;
    for (v, k) in values.iter().zip(keys) {
        let b = (mix64(k.to_bits()) % BATCHES as u64) as usize;
        sums[b] += v;
        counts[b] += 1;
        total += v;
    }
    let estimate = total / values.len() as f64;
    let batch_means: Vec<f64> = sums
        .iter()
        .zip(counts.iter())
        .filter(|(_, &c)| c > 0)
        .map(|(&s, &c)| s / c as f64)
        .collect();
    if batch_means.len() < 2 {
        return (estimate, f64::INFINITY);
    }
    let se = (variance(&batch_means) / batch_means.len() as f64).sqrt();
    (estimate, se)
}

/// Jackknife standard error of the sample mean.
pub fn jackknife_se_mean(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return f64::INFINITY;
    }
    let total: f64 = xs.iter().sum();
    let grand = total / n;
    // Leave-one-out means (total - x_i)/(n-1); their spread around the
    // grand mean gives the usual (n-1)/n scaled sum of squares.
    let ss: f64 = xs
        .iter()
        .map(|&x| {
            let loo = (total - x) / (n - 1.0);
            (loo - grand) * (loo - grand)
        })
        .sum();
    ((n - 1.0) / n * ss).sqrt()
}

/// Ordinary least squares fit y = slope * x + intercept.
#[derive(Debug, Clone)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_se: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit, StatsError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(StatsError::TooFewSamples {
            got: xs.len().min(ys.len()),
            need: 2,
        });
    }
    let n = xs.len() as f64;
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(StatsError::Degenerate);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    let slope_se = if xs.len() > 2 {
        (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit {
        slope,
        intercept,
        r2,
        slope_se,
    })
}
