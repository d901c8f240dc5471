//! Particle marginal Metropolis-Hastings over the variance parameters,
//! used offline to produce reference posteriors and state trajectories.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::dist;
use crate::error::{Error, Result};
use crate::filters::{init_particles, propagate_only_step, sis_step, FilterConfig, ParticleSystem};
use crate::kalman::kalman_filter;
use crate::model::{ModelSpec, ParameterSet, PriorSpec, StateNoise, TimeSeries, WPrior};
use crate::resampling::Resampler;

/// Default random-walk standard deviation per log-variance coordinate.
pub const DEFAULT_STEP_SD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct PmmhConfig {
    pub n_iter: usize,
    /// Particles in the inner SIR filter.
    pub n_particles: usize,
    /// Random-walk covariance on the log-variances (`W` diagonal, then `V`).
    /// A zero row and column holds that parameter fixed.
    pub step_covariance: DMatrix<f64>,
    pub initial: ParameterSet,
    pub burn_in: usize,
    pub thin: usize,
    pub resampler: Resampler,
}

impl PmmhConfig {
    pub fn new(initial: ParameterSet, n_iter: usize, n_particles: usize) -> Self {
        let d = initial.w.dim() + usize::from(initial.v.is_some());
        Self {
            n_iter,
            n_particles,
            step_covariance: DMatrix::from_diagonal_element(d, d, DEFAULT_STEP_SD * DEFAULT_STEP_SD),
            initial,
            burn_in: 0,
            thin: 1,
            resampler: Resampler::default(),
        }
    }

    pub fn with_burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn with_thin(mut self, thin: usize) -> Self {
        self.thin = thin;
        self
    }

    pub fn with_step_covariance(mut self, cov: DMatrix<f64>) -> Self {
        self.step_covariance = cov;
        self
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.n_iter <= self.burn_in {
            return Err(Error::InvalidConfig(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.n_iter, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig("thinning interval must be at least 1".into()));
        }
        if self.n_particles < 2 {
            return Err(Error::InvalidConfig("the inner filter needs at least 2 particles".into()));
        }
        if matches!(self.initial.w, StateNoise::Full(_)) {
            return Err(Error::InvalidConfig("PMMH supports a diagonal W only".into()));
        }
        self.initial.validate_for_filtering(spec)?;
        let d = to_unconstrained(&self.initial)?.len();
        let c = &self.step_covariance;
        if c.nrows() != d || c.ncols() != d {
            return Err(Error::Dimension { expected: d, actual: c.nrows() });
        }
        if !dist::is_symmetric(c, 1e-12) {
            return Err(Error::InvalidConfig("step covariance must be symmetric".into()));
        }
        dist::psd_factor(c).map(|_| ())
    }
}

/// Log-variances `(ln w_1, …, ln w_m, ln V)`.
pub fn to_unconstrained(p: &ParameterSet) -> Result<DVector<f64>> {
    let StateNoise::Diagonal(w) = &p.w else {
        return Err(Error::InvalidConfig("PMMH supports a diagonal W only".into()));
    };
    let values: Vec<f64> = w.iter().chain(p.v.iter()).copied().collect();
    if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameters("PMMH needs strictly positive variances".into()));
    }
    Ok(DVector::from_iterator(values.len(), values.into_iter().map(f64::ln)))
}

pub fn from_unconstrained(x: &DVector<f64>, state_dim: usize, has_v: bool) -> ParameterSet {
    let w: Vec<f64> = x.iter().take(state_dim).map(|v| v.exp()).collect();
    ParameterSet::diagonal(&w, has_v.then(|| x[state_dim].exp()))
}

/// `ln π(Φ) + ln |∂Φ/∂x|` for the log-variance coordinates `x`.
pub fn log_prior_unconstrained(x: &DVector<f64>, prior: &PriorSpec, state_dim: usize) -> Result<f64> {
    let Some(WPrior::Diagonal(igs)) = prior.w_prior.as_ref() else {
        return Err(Error::InvalidPrior("PMMH needs inverse-gamma priors on the W diagonal".into()));
    };
    if igs.len() != state_dim {
        return Err(Error::Dimension { expected: state_dim, actual: igs.len() });
    }
    let mut total = 0.0;
    for (ig, xi) in igs.iter().zip(x.iter()) {
        total += ig.ln_pdf(xi.exp()) + xi;
    }
    if x.len() > state_dim {
        let ig = prior.v_prior.ok_or_else(|| Error::InvalidPrior("PMMH needs an inverse-gamma prior on V".into()))?;
        total += ig.ln_pdf(x[state_dim].exp()) + x[state_dim];
    }
    Ok(total)
}

/// One likelihood evaluation: `ln p̂(y_{1:T} | Φ)` and the filtered means.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodEstimate {
    pub loglik: f64,
    pub filtered_means: Vec<DVector<f64>>,
}

pub trait LikelihoodEstimator {
    fn estimate(
        &mut self,
        series: &TimeSeries,
        spec: &ModelSpec,
        prior: &PriorSpec,
        params: &ParameterSet,
        rng: &mut dyn RngCore,
    ) -> Result<LikelihoodEstimate>;
}

/// Unbiased SIR estimate of the marginal likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmcLikelihood {
    pub n_particles: usize,
    pub resampler: Resampler,
}

impl LikelihoodEstimator for SmcLikelihood {
    fn estimate(
        &mut self,
        series: &TimeSeries,
        spec: &ModelSpec,
        prior: &PriorSpec,
        params: &ParameterSet,
        rng: &mut dyn RngCore,
    ) -> Result<LikelihoodEstimate> {
        let cfg = FilterConfig::new(self.n_particles, 0).with_resampler(self.resampler);
        run_sir(series, spec, prior, params, &cfg, rng)
    }
}

/// Exact Kalman likelihood (Normal family only).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KalmanLikelihood;

impl LikelihoodEstimator for KalmanLikelihood {
    fn estimate(
        &mut self,
        series: &TimeSeries,
        spec: &ModelSpec,
        prior: &PriorSpec,
        params: &ParameterSet,
        _rng: &mut dyn RngCore,
    ) -> Result<LikelihoodEstimate> {
        let out = kalman_filter(series, spec, params, prior)?;
        Ok(LikelihoodEstimate { loglik: out.loglik, filtered_means: out.means })
    }
}

fn run_sir(
    series: &TimeSeries,
    spec: &ModelSpec,
    prior: &PriorSpec,
    params: &ParameterSet,
    cfg: &FilterConfig,
    rng: &mut dyn RngCore,
) -> Result<LikelihoodEstimate> {
    let mut ps: ParticleSystem = init_particles(prior, spec, cfg, rng)?;
    let mut means = Vec::with_capacity(series.len());
    for y in series.values() {
        let step = match y {
            Some(y) => sis_step(&mut ps, spec, params, y, rng),
            None => propagate_only_step(&mut ps, spec, params, rng),
        };
        match step {
            Ok(()) => {}
            Err(Error::WeightCollapse) => {
                return Ok(LikelihoodEstimate { loglik: f64::NEG_INFINITY, filtered_means: Vec::new() })
            }
            Err(e) => return Err(e),
        }
        means.push(ps.weighted_mean());
        if y.is_some() {
            let idx = cfg.resampler.resample(ps.weights(), rng);
            ps.select(&idx);
        }
    }
    Ok(LikelihoodEstimate { loglik: ps.log_likelihood(), filtered_means: means })
}

/// SIR estimate of `ln p(y_{1:T} | Φ)`: the sum over observed steps of the
/// log mean unnormalised incremental weight. Missing observations add 0 and
/// weight collapse gives `-∞`.
pub fn estimate_loglik<R: Rng>(
    series: &TimeSeries,
    spec: &ModelSpec,
    prior: &PriorSpec,
    params: &ParameterSet,
    n_particles: usize,
    rng: &mut R,
) -> Result<f64> {
    SmcLikelihood { n_particles, resampler: Resampler::default() }
        .estimate(series, spec, prior, params, rng)
        .map(|e| e.loglik)
}

/// Metropolis-Hastings decision on log targets. A proposal with target
/// `-∞` (or NaN) is always rejected; a current point at `-∞` is left for any
/// finite proposal.
pub fn mh_accept(log_u: f64, proposed: f64, current: f64) -> bool {
    if !(proposed > f64::NEG_INFINITY) {
        return false;
    }
    if current == f64::NEG_INFINITY {
        return true;
    }
    log_u < proposed - current
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmmhTrace {
    /// Chain state after every iteration.
    pub draws: Vec<ParameterSet>,
    /// Log-likelihood estimate attached to each chain state.
    pub logliks: Vec<f64>,
    pub accepted: usize,
    /// Filtered-mean trajectories of retained iterations.
    pub trajectories: Vec<Vec<DVector<f64>>>,
    pub burn_in: usize,
    pub thin: usize,
}

impl PmmhTrace {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.draws.len().max(1) as f64
    }

    fn is_retained(&self, i: usize) -> bool {
        i >= self.burn_in && (i - self.burn_in).is_multiple_of(self.thin)
    }

    /// Draws after burn-in, thinned.
    pub fn retained(&self) -> impl Iterator<Item = &ParameterSet> + '_ {
        self.draws.iter().enumerate().filter(|(i, _)| self.is_retained(*i)).map(|(_, d)| d)
    }

    /// Mean over retained iterations of the stored filtered trajectories.
    pub fn reference_trajectory(&self) -> Option<Vec<DVector<f64>>> {
        let first = self.trajectories.iter().find(|t| !t.is_empty())?;
        let mut acc: Vec<DVector<f64>> = first.iter().map(|v| DVector::zeros(v.len())).collect();
        let len = acc.len();
        let mut count = 0.0;
        for traj in self.trajectories.iter().filter(|t| t.len() == len) {
            for (a, v) in acc.iter_mut().zip(traj) {
                *a += v;
            }
            count += 1.0;
        }
        Some(acc.into_iter().map(|a| a / count).collect())
    }
}

/// Random-walk PMMH on the log-variances with the full acceptance ratio:
/// likelihood estimate, prior and log-scale Jacobian.
pub fn pmmh_run<R: Rng, E: LikelihoodEstimator>(
    series: &TimeSeries,
    spec: &ModelSpec,
    prior: &PriorSpec,
    cfg: &PmmhConfig,
    estimator: &mut E,
    rng: &mut R,
) -> Result<PmmhTrace> {
    cfg.validate(spec)?;
    prior.validate(spec)?;
    let m = spec.state_dim();
    let has_v = cfg.initial.v.is_some();
    let factor = dist::psd_factor(&cfg.step_covariance)?;
    let d = factor.nrows();

    let mut x = to_unconstrained(&cfg.initial)?;
    let mut current = cfg.initial.clone();
    let mut est = estimator.estimate(series, spec, prior, &current, rng)?;
    let mut log_prior = log_prior_unconstrained(&x, prior, m)?;

    let mut trace = PmmhTrace {
        draws: Vec::with_capacity(cfg.n_iter),
        logliks: Vec::with_capacity(cfg.n_iter),
        accepted: 0,
        trajectories: Vec::new(),
        burn_in: cfg.burn_in,
        thin: cfg.thin,
    };
    for i in 0..cfg.n_iter {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x_new = &x + &factor * z;
        let proposal = from_unconstrained(&x_new, m, has_v);
        let prior_new = log_prior_unconstrained(&x_new, prior, m)?;
        let est_new = if proposal.validate_for_filtering(spec).is_ok() {
            estimator.estimate(series, spec, prior, &proposal, rng)?
        } else {
            LikelihoodEstimate { loglik: f64::NEG_INFINITY, filtered_means: Vec::new() }
        };
        let log_u = rng.random::<f64>().ln();
        if mh_accept(log_u, est_new.loglik + prior_new, est.loglik + log_prior) {
            x = x_new;
            current = proposal;
            est = est_new;
            log_prior = prior_new;
            trace.accepted += 1;
        }
        trace.draws.push(current.clone());
        trace.logliks.push(est.loglik);
        if trace.is_retained(i) {
            trace.trajectories.push(est.filtered_means.clone());
        }
    }
    Ok(trace)
}
