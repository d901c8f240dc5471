//! Dynamic generalised linear model definitions.
//!
//! A model is an observation family (with its canonical link), an
//! observation vector `F` and an evolution matrix `G`:
//!
//! ```text
//! y_t | θ_t ~ f(y_t | η_t),   η_t = link⁻¹(Fᵀθ_t)
//! θ_t | θ_{t-1} ~ N(G θ_{t-1}, W)
//! ```

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use smallvec::SmallVec;

use crate::dist::{self, InverseGamma, InverseWishart, LN_2PI};
use crate::error::{Error, Result};

/// Linear predictors are clamped to `[-ETA_CLAMP, ETA_CLAMP]` before any
/// exponential is taken.
pub const ETA_CLAMP: f64 = 300.0;

/// Inline storage for per-state-component values.
pub type ComponentVec = SmallVec<[f64; 6]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Normal,
    Poisson,
    Binomial { trials: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Log,
    Logit,
}

impl Family {
    pub fn link(self) -> Link {
        match self {
            Family::Normal => Link::Identity,
            Family::Poisson => Link::Log,
            Family::Binomial { .. } => Link::Logit,
        }
    }

    /// Whether the family carries an observation variance `V`.
    pub fn has_obs_variance(self) -> bool {
        matches!(self, Family::Normal)
    }

    pub fn validate_observation(self, y: f64) -> Result<()> {
        let ok = match self {
            Family::Normal => y.is_finite(),
            Family::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
            Family::Binomial { trials } => y >= 0.0 && y <= trials as f64 && y.fract() == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidObservation(format!("{y} is not a valid {self:?} observation")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    /// Level only: F-row `[1]`, G-block `[1]`.
    LocallyConstant,
    /// Level and trend: F-row `[1, 0]`, G-block `[[1, 1], [0, 1]]`.
    LocallyLinear,
    /// Reduced-form Fourier seasonality with `harmonics` rotation blocks.
    FourierSeasonal { period: usize, harmonics: usize },
}

impl Component {
    pub fn dim(&self) -> usize {
        match *self {
            Component::LocallyConstant => 1,
            Component::LocallyLinear => 2,
            Component::FourierSeasonal { harmonics, .. } => 2 * harmonics,
        }
    }
}

/// Observation vector and evolution matrix of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub obs: DVector<f64>,
    pub evolution: DMatrix<f64>,
}

/// Assembles `F` by concatenation and `G` block-diagonally from the
/// component list.
pub fn build_structure(components: &[Component]) -> Result<Structure> {
    if components.is_empty() {
        return Err(Error::InvalidModel("at least one structural component is required".into()));
    }
    for c in components {
        if let Component::FourierSeasonal { period, harmonics } = *c {
            if period < 2 || harmonics < 1 {
                return Err(Error::InvalidModel(format!(
                    "seasonal component needs period >= 2 and harmonics >= 1, got p={period}, h={harmonics}"
                )));
            }
            if 2 * harmonics >= period {
                return Err(Error::InvalidModel(format!(
                    "{harmonics} harmonics alias at period {period} (need 2h < p)"
                )));
            }
        }
    }
    let m: usize = components.iter().map(Component::dim).sum();
    let mut obs = DVector::<f64>::zeros(m);
    let mut g = DMatrix::<f64>::zeros(m, m);
    let mut at = 0;
    for c in components {
        match *c {
            Component::LocallyConstant => {
                obs[at] = 1.0;
                g[(at, at)] = 1.0;
            }
            Component::LocallyLinear => {
                obs[at] = 1.0;
                g[(at, at)] = 1.0;
                g[(at, at + 1)] = 1.0;
                g[(at + 1, at + 1)] = 1.0;
            }
            Component::FourierSeasonal { period, harmonics } => {
                let omega = 2.0 * PI / period as f64;
                for k in 1..=harmonics {
                    let (s, c) = (k as f64 * omega).sin_cos();
                    let i = at + 2 * (k - 1);
                    obs[i] = 1.0;
                    g[(i, i)] = c;
                    g[(i, i + 1)] = s;
                    g[(i + 1, i)] = -s;
                    g[(i + 1, i + 1)] = c;
                }
            }
        }
        at += c.dim();
    }
    Ok(Structure { obs, evolution: g })
}

/// A DGLM instance. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    family: Family,
    obs: DVector<f64>,
    evolution: DMatrix<f64>,
    // Row-major copy of G for the per-particle hot loop.
    g_rows: Vec<f64>,
}

impl ModelSpec {
    pub fn new(family: Family, structure: Structure) -> Result<Self> {
        let Structure { obs, evolution } = structure;
        let m = obs.len();
        if m == 0 {
            return Err(Error::InvalidModel("state dimension must be positive".into()));
        }
        if evolution.nrows() != m || evolution.ncols() != m {
            return Err(Error::InvalidModel(format!(
                "G is {}x{} but F has length {m}",
                evolution.nrows(),
                evolution.ncols()
            )));
        }
        if obs.iter().chain(evolution.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("F and G must be finite".into()));
        }
        if let Family::Binomial { trials: 0 } = family {
            return Err(Error::InvalidModel("binomial trial count must be positive".into()));
        }
        let g_rows = (0..m).flat_map(|r| (0..m).map(move |c| (r, c))).map(|rc| evolution[rc]).collect();
        Ok(Self { family, obs, evolution, g_rows })
    }

    pub fn from_components(family: Family, components: &[Component]) -> Result<Self> {
        Self::new(family, build_structure(components)?)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn link(&self) -> Link {
        self.family.link()
    }

    pub fn obs_vector(&self) -> &DVector<f64> {
        &self.obs
    }

    pub fn evolution(&self) -> &DMatrix<f64> {
        &self.evolution
    }

    pub fn state_dim(&self) -> usize {
        self.obs.len()
    }

    /// `Fᵀθ`.
    #[inline]
    pub fn linear_predictor(&self, theta: &[f64]) -> f64 {
        self.obs.iter().zip(theta).map(|(f, t)| f * t).sum()
    }

    /// Writes `Gθ` into `out`.
    #[inline]
    pub fn evolve_mean(&self, theta: &[f64], out: &mut [f64]) {
        let m = theta.len();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.g_rows[r * m..(r + 1) * m];
            *o = row.iter().zip(theta).map(|(g, t)| g * t).sum();
        }
    }
}

/// State-noise covariance `W`.
#[derive(Debug, Clone, PartialEq)]
pub enum StateNoise {
    Diagonal(ComponentVec),
    Full(DMatrix<f64>),
}

impl StateNoise {
    pub fn diagonal(values: &[f64]) -> Self {
        StateNoise::Diagonal(values.iter().copied().collect())
    }

    pub fn dim(&self) -> usize {
        match self {
            StateNoise::Diagonal(d) => d.len(),
            StateNoise::Full(m) => m.nrows(),
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            StateNoise::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            StateNoise::Full(m) => m.clone(),
        }
    }

    pub fn diagonal_entries(&self) -> ComponentVec {
        match self {
            StateNoise::Diagonal(d) => d.clone(),
            StateNoise::Full(m) => m.diagonal().iter().copied().collect(),
        }
    }

    pub fn factor(&self) -> Result<NoiseFactor> {
        match self {
            StateNoise::Diagonal(d) => {
                if d.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidParameters(format!(
                        "diagonal W entries must be finite and >= 0, got {d:?}"
                    )));
                }
                Ok(NoiseFactor::Diagonal(d.iter().map(|v| v.sqrt()).collect()))
            }
            StateNoise::Full(m) => Ok(NoiseFactor::Dense(dist::psd_factor(m)?)),
        }
    }
}

/// Square-root factor of `W`, used to draw `N(0, W)` increments.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseFactor {
    Diagonal(ComponentVec),
    Dense(DMatrix<f64>),
}

impl NoiseFactor {
    /// Adds an `N(0, W)` draw to `out`. Consumes exactly `m` standard
    /// normals regardless of the variant.
    #[inline]
    pub fn add_noise<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        match self {
            NoiseFactor::Diagonal(sd) => {
                for (o, s) in out.iter_mut().zip(sd) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o += s * z;
                }
            }
            NoiseFactor::Dense(l) => {
                let m = out.len();
                let z: ComponentVec = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                for (r, o) in out.iter_mut().enumerate() {
                    *o += (0..m).map(|c| l[(r, c)] * z[c]).sum::<f64>();
                }
            }
        }
    }
}

/// Static parameters `Φ = {W, V}`; `V` only for the Normal family.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub w: StateNoise,
    pub v: Option<f64>,
}

impl ParameterSet {
    pub fn diagonal(w: &[f64], v: Option<f64>) -> Self {
        Self { w: StateNoise::diagonal(w), v }
    }

    /// Structural validation. `V = 0` passes here (noiseless simulation);
    /// filtering additionally requires `V > 0`, see
    /// [`ParameterSet::validate_for_filtering`].
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let m = spec.state_dim();
        if self.w.dim() != m {
            return Err(Error::Dimension { expected: m, actual: self.w.dim() });
        }
        self.w.factor()?;
        match (spec.family().has_obs_variance(), self.v) {
            (true, Some(v)) if v >= 0.0 && v.is_finite() => Ok(()),
            (true, Some(v)) => Err(Error::InvalidParameters(format!("V must be >= 0, got {v}"))),
            (true, None) => Err(Error::InvalidParameters("Normal family requires V".into())),
            (false, Some(_)) => {
                Err(Error::InvalidParameters(format!("{:?} family has no observation variance", spec.family())))
            }
            (false, None) => Ok(()),
        }
    }

    pub fn validate_for_filtering(&self, spec: &ModelSpec) -> Result<()> {
        self.validate(spec)?;
        match self.v {
            Some(v) if v <= 0.0 => {
                Err(Error::InvalidParameters("filtering requires V > 0 (degenerate observation density)".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn obs_scale(&self) -> ObsScale {
        match self.v {
            Some(v) => ObsScale::new(v),
            None => ObsScale::unit(),
        }
    }
}

/// Prior on `W`.
#[derive(Debug, Clone, PartialEq)]
pub enum WPrior {
    /// Independent inverse-gamma per diagonal entry.
    Diagonal(Vec<InverseGamma>),
    InverseWishart(InverseWishart),
}

/// State prior `θ₀ ~ N(m₀, C₀)` plus optional parameter priors.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub m0: DVector<f64>,
    pub c0: DMatrix<f64>,
    pub v_prior: Option<InverseGamma>,
    pub w_prior: Option<WPrior>,
}

impl PriorSpec {
    pub fn new(m0: DVector<f64>, c0: DMatrix<f64>) -> Self {
        Self { m0, c0, v_prior: None, w_prior: None }
    }

    pub fn with_v_prior(mut self, prior: InverseGamma) -> Self {
        self.v_prior = Some(prior);
        self
    }

    pub fn with_w_prior(mut self, prior: WPrior) -> Self {
        self.w_prior = Some(prior);
        self
    }

    /// Checks dimensions and that `C₀` is symmetric PSD (a zero `C₀` pins
    /// the initial state).
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let m = spec.state_dim();
        if self.m0.len() != m {
            return Err(Error::Dimension { expected: m, actual: self.m0.len() });
        }
        if self.c0.nrows() != m || self.c0.ncols() != m {
            return Err(Error::Dimension { expected: m, actual: self.c0.nrows() });
        }
        dist::psd_factor(&self.c0).map_err(|e| Error::InvalidPrior(format!("C0: {e}")))?;
        match &self.w_prior {
            Some(WPrior::Diagonal(p)) if p.len() != m => Err(Error::Dimension { expected: m, actual: p.len() }),
            Some(WPrior::InverseWishart(iw)) if iw.scale.nrows() != m => {
                Err(Error::Dimension { expected: m, actual: iw.scale.nrows() })
            }
            _ => Ok(()),
        }
    }

    /// Checks that every parameter the model has is covered by a prior.
    pub fn validate_parameter_priors(&self, spec: &ModelSpec) -> Result<()> {
        self.validate(spec)?;
        if self.w_prior.is_none() {
            return Err(Error::InvalidPrior("a prior on W is required".into()));
        }
        if spec.family().has_obs_variance() && self.v_prior.is_none() {
            return Err(Error::InvalidPrior("Normal family requires a prior on V".into()));
        }
        Ok(())
    }

    pub fn state_factor(&self) -> Result<DMatrix<f64>> {
        dist::psd_factor(&self.c0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub t: u64,
    pub y: Option<f64>,
}

/// Univariate series with explicit missing values and strictly increasing
/// time indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeSeries {
    points: Vec<Observation>,
}

impl TimeSeries {
    pub fn new(points: Vec<Observation>) -> Result<Self> {
        for (k, pair) in points.windows(2).enumerate() {
            if pair[1].t <= pair[0].t {
                return Err(Error::InvalidObservation(format!(
                    "time index not strictly increasing at position {}: {} after {}",
                    k + 1,
                    pair[1].t,
                    pair[0].t
                )));
            }
        }
        if let Some(p) = points.iter().find(|p| p.y.is_some_and(|y| y.is_nan())) {
            return Err(Error::InvalidObservation(format!("NaN observation at t={}", p.t)));
        }
        Ok(Self { points })
    }

    /// Indexes values as `t = 1, 2, …`.
    pub fn from_values<I: IntoIterator<Item = Option<f64>>>(values: I) -> Result<Self> {
        Self::new(values.into_iter().enumerate().map(|(i, y)| Observation { t: i as u64 + 1, y }).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.points.iter()
    }

    pub fn values(&self) -> impl Iterator<Item = Option<f64>> + '_ {
        self.points.iter().map(|p| p.y)
    }

    pub fn validate_for(&self, family: Family) -> Result<()> {
        for p in &self.points {
            if let Some(y) = p.y {
                family.validate_observation(y).map_err(|e| match e {
                    Error::InvalidObservation(msg) => Error::InvalidObservation(format!("t={}: {msg}", p.t)),
                    other => other,
                })?;
            }
        }
        Ok(())
    }
}

/// Precomputed observation-variance terms for the Normal density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsScale {
    inv_var: f64,
    half_log_norm: f64,
}

impl ObsScale {
    pub fn new(var: f64) -> Self {
        Self { inv_var: 1.0 / var, half_log_norm: 0.5 * (LN_2PI + var.ln()) }
    }

    /// From `ln V`, avoiding a logarithm.
    pub fn from_log(log_var: f64) -> Self {
        Self { inv_var: (-log_var).exp(), half_log_norm: 0.5 * (LN_2PI + log_var) }
    }

    /// Placeholder for families without `V`.
    pub fn unit() -> Self {
        Self { inv_var: 1.0, half_log_norm: 0.5 * LN_2PI }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ObsKind {
    Normal,
    Poisson { ln_factorial: f64 },
    Binomial { trials: f64, ln_choose: f64 },
}

/// An observation with its `y`-only normalising terms evaluated once, so
/// the per-particle density is a handful of flops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreparedObservation {
    y: f64,
    kind: ObsKind,
}

impl PreparedObservation {
    pub fn new(family: Family, y: f64) -> Result<Self> {
        family.validate_observation(y)?;
        let kind = match family {
            Family::Normal => ObsKind::Normal,
            Family::Poisson => ObsKind::Poisson { ln_factorial: dist::ln_factorial(y) },
            Family::Binomial { trials } => {
                let n = trials as f64;
                ObsKind::Binomial {
                    trials: n,
                    ln_choose: dist::ln_factorial(n) - dist::ln_factorial(y) - dist::ln_factorial(n - y),
                }
            }
        };
        Ok(Self { y, kind })
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    /// `ln f(y | η)` for the linear predictor `η = Fᵀθ`. `scale` is only
    /// read by the Normal family.
    #[inline]
    pub fn log_density(&self, eta: f64, scale: &ObsScale) -> f64 {
        match self.kind {
            ObsKind::Normal => {
                let r = self.y - eta;
                -scale.half_log_norm - 0.5 * r * r * scale.inv_var
            }
            ObsKind::Poisson { ln_factorial } => {
                let eta = clamp_eta(eta);
                self.y * eta - eta.exp() - ln_factorial
            }
            ObsKind::Binomial { trials, ln_choose } => {
                let eta = clamp_eta(eta);
                // y·ln p + (n - y)·ln(1 - p) with ln p = -softplus(-η)
                ln_choose - self.y * dist::softplus(-eta) - (trials - self.y) * dist::softplus(eta)
            }
        }
    }
}

#[inline]
pub fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(-ETA_CLAMP, ETA_CLAMP)
}

/// `ln f(y | θ, Φ)`.
pub fn observation_logdensity(spec: &ModelSpec, params: &ParameterSet, theta: &[f64], y: f64) -> Result<f64> {
    if theta.len() != spec.state_dim() {
        return Err(Error::Dimension { expected: spec.state_dim(), actual: theta.len() });
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState);
    }
    params.validate_for_filtering(spec)?;
    let obs = PreparedObservation::new(spec.family(), y)?;
    Ok(obs.log_density(spec.linear_predictor(theta), &params.obs_scale()))
}

/// Draws `y ~ f(· | η)`; `var` is only read by the Normal family and may be
/// zero.
pub fn sample_observation<R: Rng + ?Sized>(family: Family, eta: f64, var: f64, rng: &mut R) -> f64 {
    match family {
        Family::Normal => {
            let z: f64 = rng.sample(StandardNormal);
            eta + var.sqrt() * z
        }
        Family::Poisson => {
            // rand_distr rejects rates above ~1.8e19.
            let rate = clamp_eta(eta).exp().min(1.0e19);
            Poisson::new(rate).map(|d| d.sample(rng)).unwrap_or(0.0)
        }
        Family::Binomial { trials } => {
            let p = dist::inv_logit(clamp_eta(eta));
            Binomial::new(trials as u64, p).map(|d| d.sample(rng) as f64).unwrap_or(0.0)
        }
    }
}

/// `θ_next ~ N(Gθ_prev, W)`.
pub fn propagate_state<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParameterSet,
    theta: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if theta.len() != spec.state_dim() {
        return Err(Error::Dimension { expected: spec.state_dim(), actual: theta.len() });
    }
    let factor = params.w.factor()?;
    let mut out = vec![0.0; theta.len()];
    spec.evolve_mean(theta, &mut out);
    factor.add_noise(&mut out, rng);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// `θ₀, θ₁, …, θ_T`.
    pub states: Vec<DVector<f64>>,
    pub series: TimeSeries,
}

/// Forward-simulates `len` states and observations from the model.
pub fn simulate<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParameterSet,
    prior: &PriorSpec,
    len: usize,
    rng: &mut R,
) -> Result<Simulation> {
    if len == 0 {
        return Err(Error::InvalidConfig("simulation length must be at least 1".into()));
    }
    params.validate(spec)?;
    prior.validate(spec)?;
    let factor = params.w.factor()?;
    let var = params.v.unwrap_or(0.0);
    let theta0 = dist::sample_gaussian(&prior.m0, &prior.state_factor()?, rng);
    let mut states = Vec::with_capacity(len + 1);
    let mut values = Vec::with_capacity(len);
    let mut theta: Vec<f64> = theta0.iter().copied().collect();
    states.push(theta0);
    let mut next = vec![0.0; theta.len()];
    for _ in 0..len {
        spec.evolve_mean(&theta, &mut next);
        factor.add_noise(&mut next, rng);
        std::mem::swap(&mut theta, &mut next);
        let y = sample_observation(spec.family(), spec.linear_predictor(&theta), var, rng);
        values.push(Some(y));
        states.push(DVector::from_column_slice(&theta));
    }
    Ok(Simulation { states, series: TimeSeries::from_values(values)? })
}
