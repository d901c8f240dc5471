//! Known-parameter particle filters (SIS, SIR, APF) over a shared
//! [`ParticleSystem`].
//!
//! Every filter proposes from the state transition `N(Gθ, W)`, so the
//! general importance-weight recursion reduces to `w ∝ w_prev · p(y | θ)`.
//! Weights are kept in log space throughout. A step that fails with
//! [`Error::WeightCollapse`] leaves the particle system untouched.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dist;
use crate::error::{Error, Result};
use crate::learning::{ParamCloud, SufficientStatistics};
use crate::model::{ModelSpec, NoiseFactor, ParameterSet, PreparedObservation, PriorSpec};
use crate::resampling::{self, normalize_with_total, Resampler, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ResamplePolicy {
    #[default]
    EveryStep,
    /// Resample only when `ESS < fraction · N`.
    EssBelow(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub n_particles: usize,
    pub resampler: Resampler,
    pub policy: ResamplePolicy,
    pub seed: u64,
}

impl FilterConfig {
    pub fn new(n_particles: usize, seed: u64) -> Self {
        Self { n_particles, resampler: Resampler::default(), policy: ResamplePolicy::default(), seed }
    }

    pub fn with_resampler(mut self, resampler: Resampler) -> Self {
        self.resampler = resampler;
        self
    }

    pub fn with_policy(mut self, policy: ResamplePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::InvalidConfig(format!("at least 2 particles required, got {}", self.n_particles)));
        }
        if let ResamplePolicy::EssBelow(f) = self.policy {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidConfig(format!("ESS fraction must be in (0, 1], got {f}")));
            }
        }
        Ok(())
    }

    pub(crate) fn should_resample(&self, ess: f64, n: usize) -> bool {
        match self.policy {
            ResamplePolicy::EveryStep => true,
            ResamplePolicy::EssBelow(f) => ess < f * n as f64,
        }
    }
}

/// Weighted particle approximation of the filtering distribution, plus the
/// per-particle parameter draws and sufficient statistics used by the
/// learning filters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    dim: usize,
    /// Row-major `N × m`.
    states: Vec<f64>,
    log_weights: WeightVector,
    pub(crate) params: Option<ParamCloud>,
    pub(crate) suffstats: Option<Vec<SufficientStatistics>>,
    t: u64,
    ess_trace: Vec<f64>,
    log_likelihood: f64,
}

impl ParticleSystem {
    /// `n` draws from `N(m₀, C₀)` with uniform weights.
    pub fn from_prior<R: Rng + ?Sized>(prior: &PriorSpec, spec: &ModelSpec, n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("particle count must be positive".into()));
        }
        prior.validate(spec)?;
        let m = spec.state_dim();
        let factor = prior.state_factor()?;
        let mut states = Vec::with_capacity(n * m);
        for _ in 0..n {
            states.extend(dist::sample_gaussian(&prior.m0, &factor, rng).iter());
        }
        Ok(Self {
            dim: m,
            states,
            log_weights: WeightVector::uniform(n),
            params: None,
            suffstats: None,
            t: 0,
            ess_trace: Vec::new(),
            log_likelihood: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &WeightVector {
        &self.log_weights
    }

    pub fn params(&self) -> Option<&ParamCloud> {
        self.params.as_ref()
    }

    pub fn suffstats(&self) -> Option<&[SufficientStatistics]> {
        self.suffstats.as_deref()
    }

    /// Number of time steps processed.
    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn ess_trace(&self) -> &[f64] {
        &self.ess_trace
    }

    pub fn ess(&self) -> f64 {
        resampling::ess(&self.log_weights)
    }

    /// Accumulated `ln p̂(y_{1:t})` from the incremental weights.
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn weighted_mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim);
        for (i, lw) in self.log_weights.log_weights().iter().enumerate() {
            let w = lw.exp();
            for (k, v) in self.state(i).iter().enumerate() {
                mean[k] += w * v;
            }
        }
        mean
    }

    /// Resets weights to `1/N` (the driver's fallback after a collapse).
    pub fn reset_weights(&mut self) {
        self.log_weights = WeightVector::uniform(self.len());
    }

    pub(crate) fn with_learning(mut self, params: ParamCloud, suffstats: Option<Vec<SufficientStatistics>>) -> Self {
        self.params = Some(params);
        self.suffstats = suffstats;
        self
    }

    /// Replaces every per-particle field by its `indices` selection and
    /// resets the weights to uniform.
    pub(crate) fn select(&mut self, indices: &[usize]) {
        let m = self.dim;
        let mut states = Vec::with_capacity(self.states.len());
        for &j in indices {
            states.extend_from_slice(&self.states[j * m..(j + 1) * m]);
        }
        self.states = states;
        if let Some(p) = self.params.as_mut() {
            *p = p.gather(indices);
        }
        if let Some(s) = self.suffstats.as_mut() {
            *s = indices.iter().map(|&j| s[j].clone()).collect();
        }
        self.log_weights = WeightVector::uniform(indices.len());
    }

    pub(crate) fn commit(&mut self, states: Vec<f64>, weights: WeightVector, log_evidence: f64) {
        self.states = states;
        self.log_weights = weights;
        self.log_likelihood += log_evidence;
        self.t += 1;
        self.ess_trace.push(resampling::ess(&self.log_weights));
    }

    pub(crate) fn commit_propagation(&mut self, states: Vec<f64>) {
        self.states = states;
        self.t += 1;
        self.ess_trace.push(resampling::ess(&self.log_weights));
    }

    pub(crate) fn overwrite_last_ess(&mut self, ess: f64) {
        if let Some(last) = self.ess_trace.last_mut() {
            *last = ess;
        }
    }
}

pub fn init_particles<R: Rng + ?Sized>(
    prior: &PriorSpec,
    spec: &ModelSpec,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<ParticleSystem> {
    config.validate()?;
    ParticleSystem::from_prior(prior, spec, config.n_particles, rng)
}

/// `out ← Gθ + L z`.
#[inline]
pub(crate) fn transition<R: Rng + ?Sized>(
    spec: &ModelSpec,
    factor: &NoiseFactor,
    theta: &[f64],
    out: &mut [f64],
    rng: &mut R,
) {
    spec.evolve_mean(theta, out);
    factor.add_noise(out, rng);
}

/// As [`transition`] for a diagonal `W` given by standard deviations.
#[inline]
pub(crate) fn transition_diag<R: Rng + ?Sized>(
    spec: &ModelSpec,
    sd: impl Iterator<Item = f64>,
    theta: &[f64],
    out: &mut [f64],
    rng: &mut R,
) {
    spec.evolve_mean(theta, out);
    for (o, s) in out.iter_mut().zip(sd) {
        let z: f64 = rng.sample(StandardNormal);
        *o += s * z;
    }
}

fn propagate_shared<R: Rng + ?Sized>(
    ps: &ParticleSystem,
    spec: &ModelSpec,
    factor: &NoiseFactor,
    rng: &mut R,
) -> Vec<f64> {
    let m = ps.dim;
    let mut next = vec![0.0; ps.states.len()];
    for (theta, out) in ps.states.chunks_exact(m).zip(next.chunks_exact_mut(m)) {
        transition(spec, factor, theta, out, rng);
    }
    next
}

fn check_step(ps: &ParticleSystem, spec: &ModelSpec, params: &ParameterSet) -> Result<()> {
    if ps.dim != spec.state_dim() {
        return Err(Error::Dimension { expected: spec.state_dim(), actual: ps.dim });
    }
    params.validate_for_filtering(spec)
}

/// Propagates through the prior and reweights by the likelihood; no
/// resampling.
pub fn sis_step<R: Rng + ?Sized>(
    ps: &mut ParticleSystem,
    spec: &ModelSpec,
    params: &ParameterSet,
    y: f64,
    rng: &mut R,
) -> Result<()> {
    check_step(ps, spec, params)?;
    let obs = PreparedObservation::new(spec.family(), y)?;
    let scale = params.obs_scale();
    let next = propagate_shared(ps, spec, &params.w.factor()?, rng);
    let raw: Vec<f64> = next
        .chunks_exact(ps.dim)
        .zip(ps.log_weights.log_weights())
        .map(|(theta, lw)| lw + obs.log_density(spec.linear_predictor(theta), &scale))
        .collect();
    let (weights, log_total) = normalize_with_total(&raw)?;
    ps.commit(next, weights, log_total);
    Ok(())
}

/// SIS followed by resampling (per the configured policy) and a reset to
/// uniform weights. The ESS trace records the pre-resampling value.
pub fn sir_step<R: Rng + ?Sized>(
    ps: &mut ParticleSystem,
    spec: &ModelSpec,
    params: &ParameterSet,
    y: f64,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<()> {
    sis_step(ps, spec, params, y, rng)?;
    let ess = ps.ess();
    if config.should_resample(ess, ps.len()) {
        let idx = config.resampler.resample(&ps.log_weights, rng);
        ps.select(&idx);
        ps.overwrite_last_ess(ess);
    }
    Ok(())
}

/// Auxiliary particle filter with the transition mean `μ = Gθ` as the
/// first-stage characterisation. Always resamples.
pub fn apf_step<R: Rng + ?Sized>(
    ps: &mut ParticleSystem,
    spec: &ModelSpec,
    params: &ParameterSet,
    y: f64,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<()> {
    check_step(ps, spec, params)?;
    let obs = PreparedObservation::new(spec.family(), y)?;
    let scale = params.obs_scale();
    let factor = params.w.factor()?;
    let m = ps.dim;
    let n = ps.len();

    let mut mu = vec![0.0; n * m];
    let mut first_ll = Vec::with_capacity(n);
    for (theta, out) in ps.states.chunks_exact(m).zip(mu.chunks_exact_mut(m)) {
        spec.evolve_mean(theta, out);
        first_ll.push(obs.log_density(spec.linear_predictor(out), &scale));
    }
    let first: Vec<f64> = first_ll.iter().zip(ps.log_weights.log_weights()).map(|(l, lw)| l + lw).collect();
    let (first_w, first_total) = normalize_with_total(&first)?;
    let idx = config.resampler.resample(&first_w, rng);

    let mut next = vec![0.0; n * m];
    let mut second = Vec::with_capacity(n);
    for (out, &j) in next.chunks_exact_mut(m).zip(&idx) {
        out.copy_from_slice(&mu[j * m..(j + 1) * m]);
        factor.add_noise(out, rng);
        second.push(obs.log_density(spec.linear_predictor(out), &scale) - first_ll[j]);
    }
    let (weights, second_total) = normalize_with_total(&second)?;
    let evidence = first_total + second_total - (n as f64).ln();
    if let Some(p) = ps.params.as_mut() {
        *p = p.gather(&idx);
    }
    if let Some(s) = ps.suffstats.as_mut() {
        *s = idx.iter().map(|&j| s[j].clone()).collect();
    }
    ps.commit(next, weights, evidence);
    Ok(())
}

/// Moves every particle through the state model without touching weights
/// (missing observation).
pub fn propagate_only_step<R: Rng + ?Sized>(
    ps: &mut ParticleSystem,
    spec: &ModelSpec,
    params: &ParameterSet,
    rng: &mut R,
) -> Result<()> {
    if ps.dim != spec.state_dim() {
        return Err(Error::Dimension { expected: spec.state_dim(), actual: ps.dim });
    }
    let next = propagate_shared(ps, spec, &params.w.factor()?, rng);
    ps.commit_propagation(next);
    Ok(())
}
