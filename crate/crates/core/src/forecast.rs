//! k-step forecasting from a particle system and the evaluation metrics
//! used to compare filters.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::filters::{transition, ParticleSystem};
use crate::learning::ParamCloud;
use crate::model::{sample_observation, ModelSpec, ParameterSet, TimeSeries};
use crate::summary::{self, Summary};

#[derive(Debug, Clone, PartialEq)]
enum BandParams {
    Shared(ParameterSet),
    PerParticle(ParamCloud),
}

/// Forecast clouds for horizons `1..=k`, sharing the weights carried from
/// the forecast origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBand {
    dim: usize,
    weights: Vec<f64>,
    states: Vec<Vec<f64>>,
    observations: Option<Vec<Vec<f64>>>,
    params: BandParams,
}

impl ForecastBand {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    /// Particles per cloud.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Row-major `N × m` state cloud at horizon `tau` (1-based).
    pub fn states(&self, tau: usize) -> &[f64] {
        &self.states[tau - 1]
    }

    pub fn observations(&self, tau: usize) -> Option<&[f64]> {
        self.observations.as_ref().map(|o| o[tau - 1].as_slice())
    }

    pub fn state_mean(&self, tau: usize) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim);
        for (row, w) in self.states(tau).chunks_exact(self.dim).zip(&self.weights) {
            for (k, v) in row.iter().enumerate() {
                mean[k] += w * v;
            }
        }
        mean
    }

    /// Weighted mean and 95% band of each state component at `tau`.
    pub fn state_summary(&self, tau: usize) -> Result<Vec<Summary>> {
        let cloud = self.states(tau);
        (0..self.dim)
            .map(|k| {
                let column: Vec<f64> = cloud.iter().skip(k).step_by(self.dim).copied().collect();
                summary::summarize(&column, &self.weights)
            })
            .collect()
    }

    pub fn observation_summary(&self, tau: usize) -> Result<Option<Summary>> {
        self.observations(tau).map(|o| summary::summarize(o, &self.weights)).transpose()
    }
}

fn natural_weights(ps: &ParticleSystem) -> Vec<f64> {
    ps.weights().weights()
}

/// Propagates every particle `k` steps through the state model without
/// reweighting or resampling. Each particle uses its own parameter draw
/// when the system carries one, unless `shared` overrides it.
pub fn forecast_states<R: Rng + ?Sized>(
    ps: &ParticleSystem,
    spec: &ModelSpec,
    shared: Option<&ParameterSet>,
    k: usize,
    rng: &mut R,
) -> Result<ForecastBand> {
    if k == 0 {
        return Err(Error::InvalidConfig("forecast horizon must be at least 1".into()));
    }
    let m = spec.state_dim();
    if ps.dim() != m {
        return Err(Error::Dimension { expected: m, actual: ps.dim() });
    }
    let params = match (shared, ps.params()) {
        (Some(p), _) => {
            p.validate(spec)?;
            BandParams::Shared(p.clone())
        }
        (None, Some(cloud)) => BandParams::PerParticle(cloud.clone()),
        (None, None) => {
            return Err(Error::InvalidConfig("forecasting needs parameters: none shared, none per particle".into()))
        }
    };
    let n = ps.len();
    let shared_factor = match &params {
        BandParams::Shared(p) => Some(p.w.factor()?),
        BandParams::PerParticle(_) => None,
    };
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let prev = states.last().map_or(ps.states(), |s| s.as_slice());
        let mut next = vec![0.0; n * m];
        for (i, (theta, out)) in prev.chunks_exact(m).zip(next.chunks_exact_mut(m)).enumerate() {
            match (&shared_factor, &params) {
                (Some(f), _) => transition(spec, f, theta, out, rng),
                (None, BandParams::PerParticle(cloud)) => cloud.transition_row(cloud.row(i), spec, theta, out, rng)?,
                (None, BandParams::Shared(_)) => unreachable!(),
            }
        }
        states.push(next);
    }
    Ok(ForecastBand { dim: m, weights: natural_weights(ps), states, observations: None, params })
}

/// Fills the band with one observation draw per particle and horizon from
/// `f(y | θ, Φ)` under that particle's parameters.
pub fn forecast_observations<R: Rng + ?Sized>(
    mut band: ForecastBand,
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<ForecastBand> {
    if band.dim != spec.state_dim() {
        return Err(Error::Dimension { expected: spec.state_dim(), actual: band.dim });
    }
    let family = spec.family();
    let n = band.len();
    let variances: Vec<f64> = match &band.params {
        BandParams::Shared(p) => vec![p.v.unwrap_or(0.0); n],
        BandParams::PerParticle(cloud) => (0..n).map(|i| cloud.parameter_set(i).v.unwrap_or(0.0)).collect(),
    };
    let obs = band
        .states
        .iter()
        .map(|cloud| {
            cloud
                .chunks_exact(band.dim)
                .zip(&variances)
                .map(|(theta, v)| sample_observation(family, spec.linear_predictor(theta), *v, rng))
                .collect()
        })
        .collect();
    band.observations = Some(obs);
    Ok(band)
}

/// Weighted mean of a one-step observation forecast: the `ŷ_t` used in the
/// one-step forecast MSE.
pub fn one_step_prediction<R: Rng + ?Sized>(
    ps: &ParticleSystem,
    spec: &ModelSpec,
    shared: Option<&ParameterSet>,
    rng: &mut R,
) -> Result<f64> {
    let band = forecast_observations(forecast_states(ps, spec, shared, 1, rng)?, spec, rng)?;
    let obs = band.observations(1).expect("observations were just drawn");
    summary::weighted_mean(obs, band.weights())
}

/// Componentwise `(1/T) Σ_t (a_t - b_t)²`.
pub fn state_mse(estimate: &[DVector<f64>], reference: &[DVector<f64>]) -> Result<Vec<f64>> {
    if estimate.len() != reference.len() {
        return Err(Error::Dimension { expected: reference.len(), actual: estimate.len() });
    }
    let Some(first) = reference.first() else {
        return Err(Error::InvalidConfig("state MSE of empty sequences".into()));
    };
    let m = first.len();
    let mut acc = vec![0.0; m];
    for (a, b) in estimate.iter().zip(reference) {
        if a.len() != m || b.len() != m {
            return Err(Error::Dimension { expected: m, actual: a.len().max(b.len()) });
        }
        for k in 0..m {
            acc[k] += (a[k] - b[k]).powi(2);
        }
    }
    let t = estimate.len() as f64;
    Ok(acc.into_iter().map(|s| s / t).collect())
}

/// `(1/N_obs) Σ (y_t - ŷ_t)²` over the observed time points.
pub fn one_step_forecast_mse(series: &TimeSeries, predicted: &[f64]) -> Result<f64> {
    if predicted.len() != series.len() {
        return Err(Error::Dimension { expected: series.len(), actual: predicted.len() });
    }
    let (sum, count) = series
        .values()
        .zip(predicted)
        .filter_map(|(y, p)| y.map(|y| (y - p).powi(2)))
        .fold((0.0, 0usize), |(s, c), e| (s + e, c + 1));
    if count == 0 {
        return Err(Error::InvalidObservation("no observed points to score".into()));
    }
    Ok(sum / count as f64)
}
