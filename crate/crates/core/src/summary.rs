//! Weighted sample summaries.

use crate::error::{Error, Result};

/// Mean and central 95% interval of a weighted sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

pub const LOWER_PROB: f64 = 0.025;
pub const UPPER_PROB: f64 = 0.975;

fn check(values: &[f64], weights: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("empty sample".into()));
    }
    if values.len() != weights.len() {
        return Err(Error::Dimension { expected: values.len(), actual: weights.len() });
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidConfig("weights must be finite, non-negative and not all zero".into()));
    }
    Ok(())
}

pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64> {
    check(values, weights)?;
    let total: f64 = weights.iter().sum();
    Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total)
}

/// Weighted (biased, population) variance.
pub fn weighted_variance(values: &[f64], weights: &[f64]) -> Result<f64> {
    let mean = weighted_mean(values, weights)?;
    let total: f64 = weights.iter().sum();
    Ok(values.iter().zip(weights).map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>() / total)
}

/// Weighted type-7 quantile. Zero-weight points are dropped; the sorted
/// remaining points sit at nodes `p_k = Σ_{i<k} w_(i) / Σ_{i<n-1} w_(i)`,
/// and the quantile interpolates linearly between nodes. With equal
/// weights this is the usual `(k)/(n-1)` interpolation.
pub fn weighted_quantile(values: &[f64], weights: &[f64], prob: f64) -> Result<f64> {
    check(values, weights)?;
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidConfig(format!("probability {prob} outside [0, 1]")));
    }
    let mut pts: Vec<(f64, f64)> =
        values.iter().zip(weights).filter(|(_, w)| **w > 0.0).map(|(v, w)| (*v, *w)).collect();
    if pts.iter().any(|(v, _)| v.is_nan()) {
        return Err(Error::Numerical("NaN in weighted sample".into()));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pts.len();
    if n == 1 {
        return Ok(pts[0].0);
    }
    let denom: f64 = pts[..n - 1].iter().map(|p| p.1).sum();
    let mut below = 0.0;
    for k in 0..n - 1 {
        let p_lo = below / denom;
        below += pts[k].1;
        let p_hi = (below / denom).min(1.0);
        if prob <= p_hi || k == n - 2 {
            let span = p_hi - p_lo;
            let frac = if span > 0.0 { ((prob - p_lo) / span).clamp(0.0, 1.0) } else { 0.0 };
            return Ok(pts[k].0 + frac * (pts[k + 1].0 - pts[k].0));
        }
    }
    unreachable!("loop returns on the last interval")
}

pub fn summarize(values: &[f64], weights: &[f64]) -> Result<Summary> {
    Ok(Summary {
        mean: weighted_mean(values, weights)?,
        lo: weighted_quantile(values, weights, LOWER_PROB)?,
        hi: weighted_quantile(values, weights, UPPER_PROB)?,
    })
}
