//! TOML run configuration.
//!
//! ```toml
//! format_version = 1
//!
//! [model]
//! family = "poisson"          # normal | poisson | binomial
//! # trials = 20               # binomial only
//! components = [{ kind = "level" }, { kind = "seasonal", period = 24, harmonics = 2 }]
//!
//! [prior]
//! m0 = [0.0, 0.0, 0.0, 0.0, 0.0]   # default zeros
//! c0 = [1.0, 1.0, 1.0, 1.0, 1.0]   # diagonal, default ones
//! w_shape = [2.0, 2.0, 2.0, 2.0, 2.0]
//! w_scale = [0.1, 0.1, 0.1, 0.1, 0.1]
//! # v_shape = 2.0
//! # v_scale = 1.0
//!
//! [params]                    # known Φ for sis/sir/apf, simulation, PMMH start
//! w = [0.01, 0.001, 0.001, 0.001, 0.001]
//! # v = 1.0
//!
//! [filter]
//! kind = "pl"                 # sis | sir | apf | lw | storvik | pl
//! particles = 1000
//! resampler = "systematic"    # multinomial | stratified | systematic
//! # ess_threshold = 0.5       # sir/storvik: resample only below this fraction
//! delta = 0.98                # lw discount
//! on_collapse = "abort"       # abort | reset
//!
//! [forecast]
//! horizon = 24
//! one_step = true
//!
//! [pmmh]
//! iterations = 5000
//! particles = 500
//! burn_in = 1000
//! thin = 1
//! # step_sd = [0.1, 0.1, ...]
//!
//! [simulate]
//! length = 500
//!
//! [io]
//! input = "data.csv"
//! output = "out"
//! seed = 42
//! timing = true               # false writes zero times (byte-identical reruns)
//! # reference = "reference.csv"
//! ```

use std::path::{Path, PathBuf};

use dglm_core::learning::LwConfig;
use dglm_core::pmmh::{PmmhConfig, DEFAULT_STEP_SD};
use dglm_core::{
    Component, Family, FilterConfig, InverseGamma, InverseWishart, ModelSpec, ParameterSet, PriorSpec, ResamplePolicy,
    Resampler, WPrior,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub model: ModelSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamsSection>,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecast: Option<ForecastSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pmmh: Option<PmmhSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    pub io: IoSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Normal,
    Poisson,
    Binomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ComponentEntry {
    Level,
    Trend,
    Seasonal { period: usize, harmonics: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: FamilyName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<u32>,
    pub components: Vec<ComponentEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_shape: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_scale: Option<Vec<f64>>,
    /// Inverse-Wishart prior on a full `W`: degrees of freedom and a
    /// row-major scale matrix. Mutually exclusive with `w_shape`/`w_scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_dof: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_scale_matrix: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_shape: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub w: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Sis,
    #[default]
    Sir,
    Apf,
    Lw,
    Storvik,
    Pl,
}

impl FilterKind {
    pub fn learns_parameters(self) -> bool {
        matches!(self, FilterKind::Lw | FilterKind::Storvik | FilterKind::Pl)
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Sis => "sis",
            FilterKind::Sir => "sir",
            FilterKind::Apf => "apf",
            FilterKind::Lw => "lw",
            FilterKind::Storvik => "storvik",
            FilterKind::Pl => "pl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplerName {
    Multinomial,
    Stratified,
    #[default]
    Systematic,
}

impl From<ResamplerName> for Resampler {
    fn from(r: ResamplerName) -> Self {
        match r {
            ResamplerName::Multinomial => Resampler::Multinomial,
            ResamplerName::Stratified => Resampler::Stratified,
            ResamplerName::Systematic => Resampler::Systematic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapsePolicy {
    /// Stop with exit code 3 and the failing time index.
    #[default]
    Abort,
    /// Reset to uniform weights, skip the observation and carry on.
    Reset,
}

fn default_particles() -> usize {
    1000
}

fn default_delta() -> f64 {
    LwConfig::default().delta()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    #[serde(default)]
    pub kind: FilterKind,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default)]
    pub resampler: ResamplerName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ess_threshold: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub on_collapse: CollapsePolicy,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            kind: FilterKind::default(),
            particles: default_particles(),
            resampler: ResamplerName::default(),
            ess_threshold: None,
            delta: default_delta(),
            on_collapse: CollapsePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastSection {
    pub horizon: usize,
    #[serde(default)]
    pub one_step: bool,
}

fn default_thin() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmmhSection {
    pub iterations: usize,
    pub particles: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_sd: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub length: usize,
}

fn default_timing() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub seed: u64,
    #[serde(default = "default_timing")]
    pub timing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative data paths are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.io.input, &mut cfg.io.output, &mut cfg.io.reference].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.format_version != FORMAT_VERSION {
            return Err(cfg_err(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let spec = self.model_spec()?;
        let m = spec.state_dim();
        self.prior_spec(&spec)?;
        if let Some(p) = self.known_params(&spec)? {
            p.validate(&spec)?;
        }
        self.filter_config()?;
        if self.filter.kind == FilterKind::Lw {
            LwConfig::new(self.filter.delta)?;
        }
        if self.filter.ess_threshold.is_some() && !matches!(self.filter.kind, FilterKind::Sir | FilterKind::Storvik) {
            return Err(cfg_err("ess_threshold applies to sir and storvik only"));
        }
        if let Some(f) = &self.forecast {
            if f.horizon == 0 {
                return Err(cfg_err("forecast.horizon must be at least 1"));
            }
        }
        if let Some(p) = &self.pmmh {
            if let Some(sd) = &p.step_sd {
                let d = m + usize::from(spec.family().has_obs_variance());
                if sd.len() != d {
                    return Err(cfg_err(format!("pmmh.step_sd needs {d} entries, got {}", sd.len())));
                }
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let family = match (self.model.family, self.model.trials) {
            (FamilyName::Normal, None) => Family::Normal,
            (FamilyName::Poisson, None) => Family::Poisson,
            (FamilyName::Binomial, Some(trials)) => Family::Binomial { trials },
            (FamilyName::Binomial, None) => return Err(cfg_err("binomial family needs model.trials")),
            (_, Some(_)) => return Err(cfg_err("model.trials applies to the binomial family only")),
        };
        let components: Vec<Component> = self
            .model
            .components
            .iter()
            .map(|c| match *c {
                ComponentEntry::Level => Component::LocallyConstant,
                ComponentEntry::Trend => Component::LocallyLinear,
                ComponentEntry::Seasonal { period, harmonics } => Component::FourierSeasonal { period, harmonics },
            })
            .collect();
        Ok(ModelSpec::from_components(family, &components)?)
    }

    pub fn prior_spec(&self, spec: &ModelSpec) -> Result<PriorSpec, CliError> {
        let m = spec.state_dim();
        let p = &self.prior;
        let vec_or = |v: &Option<Vec<f64>>, name: &str, default: f64| -> Result<Vec<f64>, CliError> {
            match v {
                Some(v) if v.len() != m => Err(cfg_err(format!("prior.{name} needs {m} entries, got {}", v.len()))),
                Some(v) => Ok(v.clone()),
                None => Ok(vec![default; m]),
            }
        };
        let m0 = vec_or(&p.m0, "m0", 0.0)?;
        let c0 = vec_or(&p.c0, "c0", 1.0)?;
        let mut prior = PriorSpec::new(DVector::from_vec(m0), DMatrix::from_diagonal(&DVector::from_vec(c0)));
        match (&p.w_shape, &p.w_scale, p.w_dof, &p.w_scale_matrix) {
            (Some(shape), Some(scale), None, None) => {
                if shape.len() != m || scale.len() != m {
                    return Err(cfg_err(format!("prior.w_shape and prior.w_scale need {m} entries")));
                }
                let igs = shape
                    .iter()
                    .zip(scale)
                    .map(|(a, b)| InverseGamma::new(*a, *b))
                    .collect::<dglm_core::Result<Vec<_>>>()?;
                prior = prior.with_w_prior(WPrior::Diagonal(igs));
            }
            (None, None, Some(dof), Some(scale)) => {
                if scale.len() != m * m {
                    return Err(cfg_err(format!("prior.w_scale_matrix needs {} entries", m * m)));
                }
                let iw = InverseWishart::new(dof, DMatrix::from_row_slice(m, m, scale))?;
                prior = prior.with_w_prior(WPrior::InverseWishart(iw));
            }
            (None, None, None, None) => {}
            _ => return Err(cfg_err("give either w_shape and w_scale, or w_dof and w_scale_matrix, for the W prior")),
        }
        match (p.v_shape, p.v_scale) {
            (Some(a), Some(b)) => {
                if !spec.family().has_obs_variance() {
                    return Err(cfg_err("a V prior applies to the normal family only"));
                }
                prior = prior.with_v_prior(InverseGamma::new(a, b)?);
            }
            (None, None) => {}
            _ => return Err(cfg_err("give both v_shape and v_scale")),
        }
        prior.validate(spec)?;
        if self.filter.kind.learns_parameters() || self.pmmh.is_some() {
            prior.validate_parameter_priors(spec)?;
        }
        Ok(prior)
    }

    /// Fixed parameters from the `[params]` block, if any.
    pub fn known_params(&self, spec: &ModelSpec) -> Result<Option<ParameterSet>, CliError> {
        let Some(p) = &self.params else { return Ok(None) };
        if p.w.len() != spec.state_dim() {
            return Err(cfg_err(format!("params.w needs {} entries, got {}", spec.state_dim(), p.w.len())));
        }
        let params = ParameterSet::diagonal(&p.w, p.v);
        params.validate(spec)?;
        Ok(Some(params))
    }

    /// Known parameters, required for filters that do not learn them.
    pub fn required_params(&self, spec: &ModelSpec) -> Result<ParameterSet, CliError> {
        self.known_params(spec)?.ok_or_else(|| cfg_err("this run needs a [params] block"))
    }

    pub fn filter_config(&self) -> Result<FilterConfig, CliError> {
        let mut cfg =
            FilterConfig::new(self.filter.particles, self.io.seed).with_resampler(self.filter.resampler.into());
        if let Some(f) = self.filter.ess_threshold {
            cfg = cfg.with_policy(ResamplePolicy::EssBelow(f));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// PMMH settings with defaults filled in: start at `[params]` or the
    /// prior means, burn-in a fifth of the chain, step 0.1 per coordinate.
    pub fn pmmh_config(&self, spec: &ModelSpec, prior: &PriorSpec) -> Result<Option<PmmhConfig>, CliError> {
        let Some(p) = &self.pmmh else { return Ok(None) };
        let initial = match self.known_params(spec)? {
            Some(params) => params,
            None => prior_mean_params(prior)?,
        };
        let d = initial.w.dim() + usize::from(initial.v.is_some());
        let sd = p.step_sd.clone().unwrap_or_else(|| vec![DEFAULT_STEP_SD; d]);
        let cov = DMatrix::from_diagonal(&DVector::from_iterator(d, sd.iter().map(|s| s * s)));
        let cfg = PmmhConfig::new(initial, p.iterations, p.particles)
            .with_burn_in(p.burn_in.unwrap_or(p.iterations / 5))
            .with_thin(p.thin)
            .with_step_covariance(cov);
        let cfg = PmmhConfig { resampler: self.filter.resampler.into(), ..cfg };
        cfg.validate(spec)?;
        Ok(Some(cfg))
    }
}

/// Prior means, or the scale where the mean is undefined.
fn prior_mean_params(prior: &PriorSpec) -> Result<ParameterSet, CliError> {
    let mean = |ig: &InverseGamma| if ig.shape > 1.0 { ig.mean() } else { ig.scale };
    let w: Vec<f64> = match &prior.w_prior {
        Some(WPrior::Diagonal(igs)) => igs.iter().map(mean).collect(),
        _ => return Err(cfg_err("PMMH needs w_shape and w_scale priors")),
    };
    Ok(ParameterSet::diagonal(&w, prior.v_prior.as_ref().map(mean)))
}
