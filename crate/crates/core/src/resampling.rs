//! Log-weight normalisation, effective sample size and the three unbiased
//! single-distribution resamplers.
//!
//! All resamplers map a sorted sequence of points in `[0, 1)` onto the
//! cumulative weights in a single linear merge. A point `u` selects the
//! lowest index `i` with `u <= cumsum_i`; zero-weight particles are never
//! selected.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

/// Normalised log-weights: `exp` of the entries sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    log_weights: Vec<f64>,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "weight vector needs at least one particle");
        Self { log_weights: vec![-(n as f64).ln(); n] }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|lw| lw.exp()).collect()
    }

    pub fn is_uniform(&self) -> bool {
        self.log_weights.windows(2).all(|p| p[0] == p[1])
    }
}

/// Log-sum-exp normalisation with max subtraction. NaN entries count as
/// zero weight.
pub fn normalize_log_weights(raw: &[f64]) -> Result<WeightVector> {
    let (lw, _) = normalize_with_total(raw)?;
    Ok(lw)
}

/// As [`normalize_log_weights`], also returning `ln Σ exp(raw)`.
pub(crate) fn normalize_with_total(raw: &[f64]) -> Result<(WeightVector, f64)> {
    let max = raw.iter().copied().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return Err(Error::Numerical("infinite log-weight".into()));
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::WeightCollapse);
    }
    let sum: f64 = raw.iter().filter(|v| !v.is_nan()).map(|v| (v - max).exp()).sum();
    let log_total = max + sum.ln();
    let log_weights = raw.iter().map(|&v| if v.is_nan() { f64::NEG_INFINITY } else { v - log_total }).collect();
    Ok((WeightVector { log_weights }, log_total))
}

/// `1 / Σ w²`, evaluated as `(Σ e^{lw-max})² / Σ e^{2(lw-max)}` so the
/// uniform and single-atom cases come out exact. Clamped to `[1, N]`.
pub fn ess(w: &WeightVector) -> f64 {
    let max = w.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (s1, s2) = w.log_weights.iter().fold((0.0, 0.0), |(s1, s2), lw| {
        let e = (lw - max).exp();
        (s1 + e, s2 + e * e)
    });
    (s1 * s1 / s2).clamp(1.0, w.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resampler {
    Multinomial,
    Stratified,
    #[default]
    Systematic,
}

impl Resampler {
    /// `w.len()` ancestor indices.
    pub fn resample<R: Rng + ?Sized>(self, w: &WeightVector, rng: &mut R) -> Vec<usize> {
        self.draw(w, w.len(), rng)
    }

    /// `n_out` ancestor indices, in non-decreasing order.
    pub fn draw<R: Rng + ?Sized>(self, w: &WeightVector, n_out: usize, rng: &mut R) -> Vec<usize> {
        match self {
            Resampler::Multinomial => multinomial_draws(w, n_out, rng),
            Resampler::Stratified => stratified_draws(w, n_out, rng),
            Resampler::Systematic => systematic_draws(w, n_out, rng),
        }
    }
}

/// Maps non-decreasing points in `[0, 1)` to particle indices: the smallest
/// `i` with `u ≤ Σ_{j≤i} w_j`, skipping zero-weight particles.
pub fn invert_sorted(w: &WeightVector, points: impl IntoIterator<Item = f64>) -> Vec<usize> {
    let weights = w.weights();
    let n = weights.len();
    let last_live = weights.iter().rposition(|v| *v > 0.0).unwrap_or(n - 1);
    let mut out = Vec::new();
    let mut j = 0;
    let mut cum = weights[0];
    for u in points {
        while j < last_live && (cum < u || weights[j] == 0.0) {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

/// I.i.d. categorical draws. Sorted uniforms come in O(N) from normalised
/// exponential spacings.
pub fn multinomial_draws<R: Rng + ?Sized>(w: &WeightVector, n_out: usize, rng: &mut R) -> Vec<usize> {
    let mut spacings: Vec<f64> = (0..=n_out).map(|_| Exp1.sample(rng)).collect();
    let mut acc = 0.0;
    for s in spacings.iter_mut() {
        acc += *s;
        *s = acc;
    }
    let total = acc;
    invert_sorted(w, spacings[..n_out].iter().map(|s| s / total))
}

/// One uniform per stratum: `u_k = (k + ũ_k) / N`.
pub fn stratified_draws<R: Rng + ?Sized>(w: &WeightVector, n_out: usize, rng: &mut R) -> Vec<usize> {
    let n = n_out as f64;
    let points: Vec<f64> = (0..n_out).map(|k| (k as f64 + rng.random::<f64>()) / n).collect();
    invert_sorted(w, points)
}

/// A single offset `u₁ ~ U[0, 1/N)` and `u_k = u₁ + (k-1)/N`.
pub fn systematic_draws<R: Rng + ?Sized>(w: &WeightVector, n_out: usize, rng: &mut R) -> Vec<usize> {
    let offset = rng.random::<f64>() / n_out as f64;
    systematic_with_offset(w, n_out, offset)
}

pub fn resample_multinomial<R: Rng + ?Sized>(w: &WeightVector, rng: &mut R) -> Vec<usize> {
    multinomial_draws(w, w.len(), rng)
}

pub fn resample_stratified<R: Rng + ?Sized>(w: &WeightVector, rng: &mut R) -> Vec<usize> {
    stratified_draws(w, w.len(), rng)
}

pub fn resample_systematic<R: Rng + ?Sized>(w: &WeightVector, rng: &mut R) -> Vec<usize> {
    systematic_draws(w, w.len(), rng)
}

/// `n_out` systematic draws on the grid `offset + k / n_out`, with
/// `offset ∈ [0, 1/n_out)`.
pub fn systematic_with_offset(w: &WeightVector, n_out: usize, offset: f64) -> Vec<usize> {
    let n = n_out as f64;
    invert_sorted(w, (0..n_out).map(move |k| offset + k as f64 / n))
}

/// Per-index selection counts.
pub fn counts(indices: &[usize], n: usize) -> Vec<usize> {
    let mut c = vec![0; n];
    for &i in indices {
        c[i] += 1;
    }
    c
}
