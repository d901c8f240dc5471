//! Joint state and parameter filters: Liu-West kernel shrinkage, Storvik
//! and Particle Learning with conjugate sufficient statistics for the
//! variance parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::dist::{self, InverseGamma, InverseWishart};
use crate::error::{Error, Result};
use crate::filters::{transition, transition_diag, FilterConfig, ParticleSystem};
use crate::model::{
    ComponentVec, ModelSpec, NoiseFactor, ObsScale, ParameterSet, PreparedObservation, PriorSpec, StateNoise, WPrior,
};
use crate::resampling::{normalize_with_total, WeightVector};

/// Scale on which a [`ParamCloud`] stores its values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScale {
    Natural,
    /// Log-variances (Liu-West kernel space).
    Log,
}

/// Per-particle parameter draws stored row-wise: the `W` entries (diagonal
/// or full row-major `m×m`) followed by `V` when the family has one.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCloud {
    state_dim: usize,
    full_w: bool,
    has_v: bool,
    scale: ParamScale,
    values: Vec<f64>,
}

impl ParamCloud {
    pub fn from_sets(sets: &[ParameterSet], scale: ParamScale) -> Result<Self> {
        let first = sets.first().ok_or_else(|| Error::InvalidConfig("empty parameter cloud".into()))?;
        let state_dim = first.w.dim();
        let full_w = matches!(first.w, StateNoise::Full(_));
        let has_v = first.v.is_some();
        if full_w && scale == ParamScale::Log {
            return Err(Error::InvalidConfig("log-scale clouds need a diagonal W".into()));
        }
        let mut cloud = Self { state_dim, full_w, has_v, scale, values: Vec::new() };
        cloud.values.reserve(sets.len() * cloud.stride());
        for p in sets {
            if p.w.dim() != state_dim || p.v.is_some() != has_v || matches!(p.w, StateNoise::Full(_)) != full_w {
                return Err(Error::InvalidParameters("inconsistent parameter layouts in cloud".into()));
            }
            let start = cloud.values.len();
            match &p.w {
                StateNoise::Diagonal(d) => cloud.values.extend_from_slice(d),
                StateNoise::Full(m) => {
                    for r in 0..state_dim {
                        for c in 0..state_dim {
                            cloud.values.push(m[(r, c)]);
                        }
                    }
                }
            }
            cloud.values.extend(p.v);
            if scale == ParamScale::Log {
                for v in &mut cloud.values[start..] {
                    if !(*v > 0.0) {
                        return Err(Error::InvalidParameters(
                            "log-scale clouds need strictly positive variances".into(),
                        ));
                    }
                    *v = v.ln();
                }
            }
        }
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn stride(&self) -> usize {
        self.w_len() + usize::from(self.has_v)
    }

    fn w_len(&self) -> usize {
        if self.full_w {
            self.state_dim * self.state_dim
        } else {
            self.state_dim
        }
    }

    pub fn scale(&self) -> ParamScale {
        self.scale
    }

    pub fn is_full_w(&self) -> bool {
        self.full_w
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.values[i * s..(i + 1) * s]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn to_natural(&self, v: f64) -> f64 {
        match self.scale {
            ParamScale::Natural => v,
            ParamScale::Log => v.exp(),
        }
    }

    pub fn parameter_set(&self, i: usize) -> ParameterSet {
        let row = self.row(i);
        let m = self.state_dim;
        let w = if self.full_w {
            StateNoise::Full(DMatrix::from_row_slice(m, m, &row[..m * m]))
        } else {
            StateNoise::Diagonal(row[..m].iter().map(|v| self.to_natural(*v)).collect())
        };
        let v = self.has_v.then(|| self.to_natural(row[self.w_len()]));
        ParameterSet { w, v }
    }

    /// Names of the summarised quantities: diagonal `W` entries then `V`.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.state_dim).map(|k| format!("w{k}")).collect();
        if self.has_v {
            names.push("v".into());
        }
        names
    }

    /// Natural-scale values matching [`ParamCloud::names`].
    pub fn summary_values(&self, i: usize) -> ComponentVec {
        let row = self.row(i);
        let m = self.state_dim;
        let mut out: ComponentVec = if self.full_w {
            (0..m).map(|k| row[k * m + k]).collect()
        } else {
            row[..m].iter().map(|v| self.to_natural(*v)).collect()
        };
        if self.has_v {
            out.push(self.to_natural(row[self.w_len()]));
        }
        out
    }

    pub(crate) fn gather(&self, indices: &[usize]) -> Self {
        let s = self.stride();
        let mut values = Vec::with_capacity(indices.len() * s);
        for &j in indices {
            values.extend_from_slice(&self.values[j * s..(j + 1) * s]);
        }
        Self { values, ..*self }
    }

    #[inline]
    fn obs_scale_of(&self, row: &[f64]) -> ObsScale {
        if !self.has_v {
            return ObsScale::unit();
        }
        let v = row[self.w_len()];
        match self.scale {
            ParamScale::Natural => ObsScale::new(v),
            ParamScale::Log => ObsScale::from_log(v),
        }
    }

    /// `out ← Gθ + noise` under the parameters in `row`.
    #[inline]
    pub(crate) fn transition_row<R: Rng + ?Sized>(
        &self,
        row: &[f64],
        spec: &ModelSpec,
        theta: &[f64],
        out: &mut [f64],
        rng: &mut R,
    ) -> Result<()> {
        let m = self.state_dim;
        if self.full_w {
            let factor = NoiseFactor::Dense(dist::psd_factor(&DMatrix::from_row_slice(m, m, &row[..m * m]))?);
            transition(spec, &factor, theta, out, rng);
        } else {
            match self.scale {
                ParamScale::Natural => transition_diag(spec, row[..m].iter().map(|w| w.sqrt()), theta, out, rng),
                ParamScale::Log => transition_diag(spec, row[..m].iter().map(|w| (0.5 * w).exp()), theta, out, rng),
            }
        }
        Ok(())
    }
}

/// Running sums from which the conjugate parameter posterior is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStatistics {
    /// Number of state transitions recorded.
    pub n_transitions: u64,
    /// Number of observation residuals recorded (Normal family).
    pub n_residuals: u64,
    /// `Σ (θ_t - Gθ_{t-1})²` per component.
    pub sq_increments: ComponentVec,
    /// `Σ (y_t - Fᵀθ_t)²`.
    pub sq_residuals: f64,
    /// `Σ δ δᵀ` of the increments, when tracking a full `W`.
    pub cross: Option<DMatrix<f64>>,
}

impl SufficientStatistics {
    pub fn new(state_dim: usize, track_cross: bool) -> Self {
        Self {
            n_transitions: 0,
            n_residuals: 0,
            sq_increments: std::iter::repeat_n(0.0, state_dim).collect(),
            sq_residuals: 0.0,
            cross: track_cross.then(|| DMatrix::zeros(state_dim, state_dim)),
        }
    }

    /// Records `θ_t` against the transition mean `Gθ_{t-1}`.
    #[inline]
    pub fn record(&mut self, spec: &ModelSpec, theta: &[f64], transition_mean: &[f64], y: Option<f64>) {
        self.n_transitions += 1;
        for (s, (a, b)) in self.sq_increments.iter_mut().zip(theta.iter().zip(transition_mean)) {
            let d = a - b;
            *s += d * d;
        }
        if let Some(cross) = self.cross.as_mut() {
            let m = theta.len();
            for r in 0..m {
                for c in 0..m {
                    cross[(r, c)] += (theta[r] - transition_mean[r]) * (theta[c] - transition_mean[c]);
                }
            }
        }
        if let (Some(y), true) = (y, spec.family().has_obs_variance()) {
            let r = y - spec.linear_predictor(theta);
            self.n_residuals += 1;
            self.sq_residuals += r * r;
        }
    }
}

/// Returns `s` updated with the transition `θ_prev → θ_t` and, when
/// present, the observation residual.
pub fn update_suffstats(
    s: &SufficientStatistics,
    spec: &ModelSpec,
    theta: &[f64],
    theta_prev: &[f64],
    y: Option<f64>,
) -> Result<SufficientStatistics> {
    let m = spec.state_dim();
    if theta.len() != m || theta_prev.len() != m || s.sq_increments.len() != m {
        return Err(Error::Dimension { expected: m, actual: theta.len() });
    }
    let mut mean = vec![0.0; m];
    spec.evolve_mean(theta_prev, &mut mean);
    let mut out = s.clone();
    out.record(spec, theta, &mean, y);
    Ok(out)
}

/// Conjugate posterior of `Φ` given sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPosterior {
    pub w: WPrior,
    pub v: Option<InverseGamma>,
}

/// `τ_j² ~ IG(α_j + n/2, β_j + ½Σδ_j²)`, `V ~ IG(α_v + n_y/2, β_v + ½Σr²)`,
/// full `W ~ IW(ν + n, Ψ + Σδδᵀ)`.
pub fn parameter_posterior(s: &SufficientStatistics, prior: &PriorSpec) -> Result<ParameterPosterior> {
    let n = s.n_transitions as f64;
    let w = match prior.w_prior.as_ref() {
        Some(WPrior::Diagonal(igs)) => {
            if igs.len() != s.sq_increments.len() {
                return Err(Error::Dimension { expected: igs.len(), actual: s.sq_increments.len() });
            }
            WPrior::Diagonal(
                igs.iter()
                    .zip(&s.sq_increments)
                    .map(|(ig, ss)| InverseGamma { shape: ig.shape + n / 2.0, scale: ig.scale + 0.5 * ss })
                    .collect(),
            )
        }
        Some(WPrior::InverseWishart(iw)) => {
            let cross = s
                .cross
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("inverse-Wishart prior needs cross-product statistics".into()))?;
            WPrior::InverseWishart(InverseWishart { dof: iw.dof + n, scale: &iw.scale + cross })
        }
        None => return Err(Error::InvalidPrior("a prior on W is required".into())),
    };
    let v = prior.v_prior.map(|ig| InverseGamma {
        shape: ig.shape + s.n_residuals as f64 / 2.0,
        scale: ig.scale + 0.5 * s.sq_residuals,
    });
    Ok(ParameterPosterior { w, v })
}

/// Draws `Φ ~ p(Φ | s)`. With empty statistics this is a prior draw.
pub fn draw_parameters<R: Rng + ?Sized>(
    s: &SufficientStatistics,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<ParameterSet> {
    let post = parameter_posterior(s, prior)?;
    let w = match &post.w {
        WPrior::Diagonal(igs) => StateNoise::Diagonal(igs.iter().map(|ig| ig.sample(rng)).collect()),
        WPrior::InverseWishart(iw) => StateNoise::Full(iw.sample(rng)?),
    };
    Ok(ParameterSet { w, v: post.v.map(|ig| ig.sample(rng)) })
}

/// Same draw as [`draw_parameters`] written straight into a natural-scale
/// cloud row.
#[inline]
fn draw_into_row<R: Rng + ?Sized>(
    s: &SufficientStatistics,
    prior: &PriorSpec,
    row: &mut [f64],
    rng: &mut R,
) -> Result<()> {
    let n = s.n_transitions as f64;
    let m = s.sq_increments.len();
    let mut at = match prior.w_prior.as_ref() {
        Some(WPrior::Diagonal(igs)) => {
            for ((out, ig), ss) in row.iter_mut().zip(igs).zip(&s.sq_increments) {
                *out = sample_inv_gamma(ig.shape + n / 2.0, ig.scale + 0.5 * ss, rng)?;
            }
            m
        }
        Some(WPrior::InverseWishart(_)) => {
            let post = parameter_posterior(s, prior)?;
            let WPrior::InverseWishart(iw) = post.w else { unreachable!() };
            let w = iw.sample(rng)?;
            for r in 0..m {
                for c in 0..m {
                    row[r * m + c] = w[(r, c)];
                }
            }
            m * m
        }
        None => return Err(Error::InvalidPrior("a prior on W is required".into())),
    };
    if let Some(ig) = prior.v_prior {
        row[at] = sample_inv_gamma(ig.shape + s.n_residuals as f64 / 2.0, ig.scale + 0.5 * s.sq_residuals, rng)?;
        at += 1;
    }
    debug_assert_eq!(at, row.len());
    Ok(())
}

#[inline]
fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / scale).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(1.0 / g.sample(rng))
}

/// Liu-West discount settings. The shrinkage `a = (3δ - 1) / (2δ)` and the
/// bandwidth `h = √(1 - a²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LwConfig {
    delta: f64,
}

impl Default for LwConfig {
    fn default() -> Self {
        Self { delta: 0.98 }
    }
}

impl LwConfig {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 1.0 / 3.0 && delta <= 1.0) {
            return Err(Error::InvalidConfig(format!("discount must lie in (1/3, 1], got {delta}")));
        }
        Ok(Self { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn shrinkage(&self) -> f64 {
        (3.0 * self.delta - 1.0) / (2.0 * self.delta)
    }

    pub fn bandwidth(&self) -> f64 {
        let a = self.shrinkage();
        (1.0 - a * a).max(0.0).sqrt()
    }
}

/// Kernel locations and the weighted parameter covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Shrinkage {
    pub dim: usize,
    /// Row-major `N × d` locations `aΦ⁽ⁱ⁾ + (1 - a)Φ̄`.
    pub locations: Vec<f64>,
    pub mean: DVector<f64>,
    pub variance: DMatrix<f64>,
    /// Set when the variance was singular and received the diagonal floor.
    pub floored: bool,
}

pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Shrinks parameter draws (row-major `N × dim`, already on the
/// unconstrained scale) towards their weighted mean.
pub fn lw_shrink_locations(draws: &[f64], dim: usize, weights: &WeightVector, cfg: &LwConfig) -> Result<Shrinkage> {
    let n = weights.len();
    if n < 2 {
        return Err(Error::InvalidConfig("kernel shrinkage needs at least 2 particles".into()));
    }
    if dim == 0 || draws.len() != n * dim {
        return Err(Error::Dimension { expected: n * dim, actual: draws.len() });
    }
    let w = weights.weights();
    let mut mean = DVector::<f64>::zeros(dim);
    for (row, wi) in draws.chunks_exact(dim).zip(&w) {
        for (k, v) in row.iter().enumerate() {
            mean[k] += wi * v;
        }
    }
    let mut variance = DMatrix::<f64>::zeros(dim, dim);
    for (row, wi) in draws.chunks_exact(dim).zip(&w) {
        for r in 0..dim {
            let dr = row[r] - mean[r];
            for c in 0..=r {
                variance[(r, c)] += wi * dr * (row[c] - mean[c]);
            }
        }
    }
    for r in 0..dim {
        for c in 0..r {
            variance[(c, r)] = variance[(r, c)];
        }
    }
    let a = cfg.shrinkage();
    let mut locations = Vec::with_capacity(draws.len());
    for row in draws.chunks_exact(dim) {
        locations.extend(row.iter().zip(mean.iter()).map(|(v, mu)| a * v + (1.0 - a) * mu));
    }
    let floored = variance.clone().cholesky().is_none();
    if floored {
        for k in 0..dim {
            variance[(k, k)] += VARIANCE_FLOOR;
        }
    }
    Ok(Shrinkage { dim, locations, mean, variance, floored })
}

impl Shrinkage {
    /// Factor `L` with `L Lᵀ = h² V`.
    pub fn kernel_factor(&self, bandwidth: f64) -> Result<DMatrix<f64>> {
        Ok(dist::psd_factor(&self.variance)? * bandwidth)
    }
}

/// Draws one kernel sample `N(location_i, h²V)` for every location.
pub fn lw_jitter<R: Rng + ?Sized>(shrinkage: &Shrinkage, cfg: &LwConfig, rng: &mut R) -> Result<Vec<f64>> {
    let factor = shrinkage.kernel_factor(cfg.bandwidth())?;
    let d = shrinkage.dim;
    let mut out = shrinkage.locations.clone();
    for row in out.chunks_exact_mut(d) {
        add_correlated_noise(&factor, row, rng);
    }
    Ok(out)
}

#[inline]
fn add_correlated_noise<R: Rng + ?Sized>(factor: &DMatrix<f64>, out: &mut [f64], rng: &mut R) {
    let d = out.len();
    let z: ComponentVec = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for (r, o) in out.iter_mut().enumerate() {
        *o += (0..d).map(|c| factor[(r, c)] * z[c]).sum::<f64>();
    }
}

/// Where the static parameters come from at each step.
#[derive(Debug, Clone, Copy)]
pub enum ParameterSource<'a> {
    /// Conjugate draws from the sufficient statistics under this prior.
    Conjugate(&'a PriorSpec),
    /// Parameters held fixed and statistics left untouched.
    Frozen(&'a ParameterSet),
}

/// Particles from the state prior, parameters drawn from the parameter
/// prior, empty sufficient statistics. Used by Storvik and PL.
pub fn init_sufficient<R: Rng + ?Sized>(
    prior: &PriorSpec,
    spec: &ModelSpec,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<ParticleSystem> {
    config.validate()?;
    prior.validate_parameter_priors(spec)?;
    let ps = ParticleSystem::from_prior(prior, spec, config.n_particles, rng)?;
    let track_cross = matches!(prior.w_prior, Some(WPrior::InverseWishart(_)));
    let empty = SufficientStatistics::new(spec.state_dim(), track_cross);
    let sets = (0..config.n_particles).map(|_| draw_parameters(&empty, prior, rng)).collect::<Result<Vec<_>>>()?;
    let cloud = ParamCloud::from_sets(&sets, ParamScale::Natural)?;
    Ok(ps.with_learning(cloud, Some(vec![empty; config.n_particles])))
}

/// Particles from the state prior sharing one fixed parameter set; the
/// [`ParameterSource::Frozen`] counterpart of [`init_sufficient`].
pub fn init_frozen<R: Rng + ?Sized>(
    prior: &PriorSpec,
    spec: &ModelSpec,
    params: &ParameterSet,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<ParticleSystem> {
    config.validate()?;
    params.validate_for_filtering(spec)?;
    let ps = ParticleSystem::from_prior(prior, spec, config.n_particles, rng)?;
    let cloud = ParamCloud::from_sets(&vec![params.clone(); config.n_particles], ParamScale::Natural)?;
    let empty = SufficientStatistics::new(spec.state_dim(), false);
    Ok(ps.with_learning(cloud, Some(vec![empty; config.n_particles])))
}

/// Particles from the state prior with log-scale parameter draws from a
/// diagonal inverse-gamma prior.
pub fn init_liu_west<R: Rng + ?Sized>(
    prior: &PriorSpec,
    spec: &ModelSpec,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<ParticleSystem> {
    config.validate()?;
    prior.validate_parameter_priors(spec)?;
    if !matches!(prior.w_prior, Some(WPrior::Diagonal(_))) {
        return Err(Error::InvalidConfig("Liu-West supports diagonal W priors only".into()));
    }
    let ps = ParticleSystem::from_prior(prior, spec, config.n_particles, rng)?;
    let empty = SufficientStatistics::new(spec.state_dim(), false);
    let sets = (0..config.n_particles).map(|_| draw_parameters(&empty, prior, rng)).collect::<Result<Vec<_>>>()?;
    Ok(ps.with_learning(ParamCloud::from_sets(&sets, ParamScale::Log)?, None))
}

fn learning_parts<'a>(ps: &'a ParticleSystem, spec: &ModelSpec) -> Result<&'a ParamCloud> {
    if ps.dim() != spec.state_dim() {
        return Err(Error::Dimension { expected: spec.state_dim(), actual: ps.dim() });
    }
    ps.params().ok_or_else(|| Error::InvalidConfig("particle system carries no parameter draws".into()))
}

fn suffstats_of(ps: &ParticleSystem) -> Result<&[SufficientStatistics]> {
    ps.suffstats().ok_or_else(|| Error::InvalidConfig("particle system carries no sufficient statistics".into()))
}

/// Sample-resample step: draw `Φ⁽ⁱ⁾ ~ p(Φ | s⁽ⁱ⁾)`, propagate, weight by
/// `p(y | θ, Φ)`, update statistics, then resample `(θ, Φ, s)` together.
pub fn storvik_step<R: Rng + ?Sized>(
    ps: &mut ParticleSystem,
    spec: &ModelSpec,
    source: ParameterSource<'_>,
    y: f64,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<()> {
    let cloud = learning_parts(ps, spec)?;
    if cloud.scale() != ParamScale::Natural {
        return Err(Error::InvalidConfig("Storvik needs natural-scale parameter draws".into()));
    }
    let stats = suffstats_of(ps)?;
    let obs = PreparedObservation::new(spec.family(), y)?;
    let m = ps.dim();
    let n = ps.len();
    let mut new_cloud = cloud.clone();
    let stride = new_cloud.stride();
    let mut new_stats = stats.to_vec();
    let mut mean = vec![0.0; m];
    let mut next = vec![0.0; n * m];
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let row = &mut new_cloud.values[i * stride..(i + 1) * stride];
        if let ParameterSource::Conjugate(prior) = source {
            draw_into_row(&stats[i], prior, row, rng)?;
        }
        let row = new_cloud.row(i);
        let out = &mut next[i * m..(i + 1) * m];
        new_cloud.transition_row(row, spec, ps.state(i), out, rng)?;
        raw.push(
            ps.weights().log_weights()[i] + obs.log_density(spec.linear_predictor(out), &new_cloud.obs_scale_of(row)),
        );
        if let ParameterSource::Conjugate(_) = source {
            spec.evolve_mean(ps.state(i), &mut mean);
            new_stats[i].record(spec, out, &mean, Some(y));
        }
    }
    let (weights, log_total) = normalize_with_total(&raw)?;
    ps.params = Some(new_cloud);
    ps.suffstats = Some(new_stats);
    ps.commit(next, weights, log_total);
    let ess = ps.ess();
    if config.should_resample(ess, n) {
        let idx = config.resampler.resample(ps.weights(), rng);
        ps.select(&idx);
        ps.overwrite_last_ess(ess);
    }
    Ok(())
}

/// Resample-sample step: first-stage weights from the predictive density at
/// `μ = Gθ`, resample `(θ, Φ, s)`, propagate, update statistics, redraw
/// `Φ`, then correct by `p(y | θ) / p(y | μ)` under the parameters used for
/// the first stage.
pub fn pl_step<R: Rng + ?Sized>(
    ps: &mut ParticleSystem,
    spec: &ModelSpec,
    source: ParameterSource<'_>,
    y: f64,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<()> {
    let cloud = learning_parts(ps, spec)?;
    if cloud.scale() != ParamScale::Natural {
        return Err(Error::InvalidConfig("Particle Learning needs natural-scale parameter draws".into()));
    }
    let stats = suffstats_of(ps)?;
    let obs = PreparedObservation::new(spec.family(), y)?;
    let m = ps.dim();
    let n = ps.len();

    let mut mu = vec![0.0; n * m];
    let mut first_ll = Vec::with_capacity(n);
    for (i, out) in mu.chunks_exact_mut(m).enumerate() {
        spec.evolve_mean(ps.state(i), out);
        first_ll.push(obs.log_density(spec.linear_predictor(out), &cloud.obs_scale_of(cloud.row(i))));
    }
    let first: Vec<f64> = first_ll.iter().zip(ps.weights().log_weights()).map(|(l, lw)| l + lw).collect();
    let (first_w, first_total) = normalize_with_total(&first)?;
    let idx = config.resampler.resample(&first_w, rng);

    let mut new_cloud = cloud.gather(&idx);
    let stride = new_cloud.stride();
    let mut new_stats = Vec::with_capacity(n);
    let mut next = vec![0.0; n * m];
    let mut second = Vec::with_capacity(n);
    for (k, &j) in idx.iter().enumerate() {
        let parent_row = cloud.row(j);
        let out = &mut next[k * m..(k + 1) * m];
        out.copy_from_slice(&mu[j * m..(j + 1) * m]);
        add_row_noise(cloud, parent_row, out, rng)?;
        second.push(obs.log_density(spec.linear_predictor(out), &cloud.obs_scale_of(parent_row)) - first_ll[j]);
        let mut s = stats[j].clone();
        if let ParameterSource::Conjugate(prior) = source {
            s.record(spec, out, &mu[j * m..(j + 1) * m], Some(y));
            draw_into_row(&s, prior, &mut new_cloud.values[k * stride..(k + 1) * stride], rng)?;
        }
        new_stats.push(s);
    }
    let (weights, second_total) = normalize_with_total(&second)?;
    ps.params = Some(new_cloud);
    ps.suffstats = Some(new_stats);
    ps.commit(next, weights, first_total + second_total - (n as f64).ln());
    Ok(())
}

/// Adds `N(0, W)` noise for the parameters in `row` to a vector already
/// holding the transition mean.
#[inline]
fn add_row_noise<R: Rng + ?Sized>(cloud: &ParamCloud, row: &[f64], out: &mut [f64], rng: &mut R) -> Result<()> {
    let m = cloud.state_dim;
    if cloud.full_w {
        let factor = NoiseFactor::Dense(dist::psd_factor(&DMatrix::from_row_slice(m, m, &row[..m * m]))?);
        factor.add_noise(out, rng);
    } else {
        for (o, w) in out.iter_mut().zip(&row[..m]) {
            let sd = match cloud.scale {
                ParamScale::Natural => w.sqrt(),
                ParamScale::Log => (0.5 * w).exp(),
            };
            let z: f64 = rng.sample(StandardNormal);
            *o += sd * z;
        }
    }
    Ok(())
}

/// Liu-West step on log-scale parameters: first-stage weights at the
/// transition mean under the kernel locations, resample, jitter parameters
/// around the parent's location, propagate, and correct.
pub fn lw_step<R: Rng + ?Sized>(
    ps: &mut ParticleSystem,
    spec: &ModelSpec,
    lw: &LwConfig,
    y: f64,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<()> {
    let cloud = learning_parts(ps, spec)?;
    if cloud.scale() != ParamScale::Log {
        return Err(Error::InvalidConfig("Liu-West needs log-scale parameter draws".into()));
    }
    let obs = PreparedObservation::new(spec.family(), y)?;
    let m = ps.dim();
    let n = ps.len();
    let d = cloud.stride();
    let shrink = lw_shrink_locations(cloud.values(), d, ps.weights(), lw)?;
    let kernel = shrink.kernel_factor(lw.bandwidth())?;
    let locations = &shrink.locations;

    let mut mu = vec![0.0; n * m];
    let mut first_ll = Vec::with_capacity(n);
    for (i, out) in mu.chunks_exact_mut(m).enumerate() {
        spec.evolve_mean(ps.state(i), out);
        let loc = &locations[i * d..(i + 1) * d];
        first_ll.push(obs.log_density(spec.linear_predictor(out), &cloud.obs_scale_of(loc)));
    }
    let first: Vec<f64> = first_ll.iter().zip(ps.weights().log_weights()).map(|(l, lw)| l + lw).collect();
    let (first_w, first_total) = normalize_with_total(&first)?;
    let idx = config.resampler.resample(&first_w, rng);

    let mut values = vec![0.0; n * d];
    let mut next = vec![0.0; n * m];
    let mut second = Vec::with_capacity(n);
    for (k, &j) in idx.iter().enumerate() {
        let row = &mut values[k * d..(k + 1) * d];
        row.copy_from_slice(&locations[j * d..(j + 1) * d]);
        add_correlated_noise(&kernel, row, rng);
        let out = &mut next[k * m..(k + 1) * m];
        out.copy_from_slice(&mu[j * m..(j + 1) * m]);
        for (o, lw) in out.iter_mut().zip(&row[..m]) {
            let z: f64 = rng.sample(StandardNormal);
            *o += (0.5 * lw).exp() * z;
        }
        second.push(obs.log_density(spec.linear_predictor(out), &cloud.obs_scale_of(row)) - first_ll[j]);
    }
    let (weights, second_total) = normalize_with_total(&second)?;
    let new_cloud = ParamCloud { values, ..*cloud };
    ps.params = Some(new_cloud);
    ps.commit(next, weights, first_total + second_total - (n as f64).ln());
    Ok(())
}

/// Missing observation for a learning filter: propagate each particle under
/// its own parameters and leave the weights alone. Sufficient-statistics
/// filters still record the transition and redraw `Φ` from the updated
/// statistics.
pub fn learning_propagate_step<R: Rng + ?Sized>(
    ps: &mut ParticleSystem,
    spec: &ModelSpec,
    source: Option<ParameterSource<'_>>,
    rng: &mut R,
) -> Result<()> {
    let cloud = learning_parts(ps, spec)?;
    let m = ps.dim();
    let n = ps.len();
    let mut next = vec![0.0; n * m];
    let mut mean = vec![0.0; m];
    let mut new_cloud = cloud.clone();
    let stride = cloud.stride();
    let mut new_stats = ps.suffstats.clone();
    for i in 0..n {
        let out = &mut next[i * m..(i + 1) * m];
        cloud.transition_row(cloud.row(i), spec, ps.state(i), out, rng)?;
        if let (Some(ParameterSource::Conjugate(prior)), Some(stats)) = (source, new_stats.as_mut()) {
            spec.evolve_mean(ps.state(i), &mut mean);
            stats[i].record(spec, out, &mean, None);
            draw_into_row(&stats[i], prior, &mut new_cloud.values[i * stride..(i + 1) * stride], rng)?;
        }
    }
    ps.params = Some(new_cloud);
    ps.suffstats = new_stats;
    ps.commit_propagation(next);
    Ok(())
}
