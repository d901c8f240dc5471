//! Runs a configured filter over a series and collects the report.

use std::time::Instant;

use dglm_core::forecast::{forecast_observations, forecast_states, one_step_prediction, state_mse};
use dglm_core::learning::{
    init_liu_west, init_sufficient, learning_propagate_step, lw_step, pl_step, storvik_step, LwConfig, ParameterSource,
};
use dglm_core::pmmh::{pmmh_run, PmmhConfig, PmmhTrace, SmcLikelihood};
use dglm_core::summary::{self, Summary};
use dglm_core::{
    apf_step, init_particles, one_step_forecast_mse, propagate_only_step, simulate, sir_step, sis_step, Error,
    FilterConfig, ModelSpec, ParameterSet, ParticleSystem, PriorSpec, Simulation, TimeSeries,
};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CollapsePolicy, FilterKind, RunConfig};
use crate::csvio::parse_reference;
use crate::error::CliError;

/// Natural-scale parameter variance below which a learning filter is
/// flagged as collapsed.
pub const COLLAPSE_VARIANCE: f64 = 1e-6;

const STREAM_FILTER: u64 = 0;
const STREAM_ONE_STEP: u64 = 1;
const STREAM_FORECAST: u64 = 2;
const STREAM_PMMH: u64 = 3;
const STREAM_SIMULATE: u64 = 4;

/// Independent generator for one part of a run, derived from the seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: u64,
    pub y: Option<f64>,
    pub ess: f64,
    pub states: Vec<Summary>,
    pub params: Vec<Summary>,
    /// Wall-clock time of the assimilation step in milliseconds.
    pub time_ms: f64,
    /// One-step observation forecast made before assimilating `y`.
    pub y_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    pub tau: usize,
    pub states: Vec<Summary>,
    pub observation: Summary,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Footer {
    pub total_ms: f64,
    pub mean_iteration_ms: f64,
    pub state_mse: Option<Vec<f64>>,
    pub one_step_mse: Option<f64>,
    /// Weighted variance of each parameter across particles at the end.
    pub final_param_variance: Vec<f64>,
    /// Parameters whose final variance fell below [`COLLAPSE_VARIANCE`].
    pub collapsed: Vec<String>,
    /// Time indices where the weights collapsed and were reset.
    pub resets: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmmhOutcome {
    pub config: PmmhConfig,
    pub names: Vec<String>,
    pub trace: PmmhTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: RunConfig,
    pub state_dim: usize,
    pub param_names: Vec<String>,
    pub records: Vec<StepRecord>,
    pub forecast: Option<Vec<ForecastRecord>>,
    pub pmmh: Option<PmmhOutcome>,
    pub footer: Footer,
}

fn param_names(spec: &ModelSpec) -> Vec<String> {
    let mut names: Vec<String> = (1..=spec.state_dim()).map(|k| format!("w{k}")).collect();
    if spec.family().has_obs_variance() {
        names.push("v".into());
    }
    names
}

struct Runner {
    kind: FilterKind,
    spec: ModelSpec,
    prior: PriorSpec,
    params: Option<ParameterSet>,
    lw: LwConfig,
    filter: FilterConfig,
}

impl Runner {
    fn new(config: &RunConfig) -> Result<Self, CliError> {
        let spec = config.model_spec()?;
        let prior = config.prior_spec(&spec)?;
        let kind = config.filter.kind;
        let params = if kind.learns_parameters() {
            config.known_params(&spec)?
        } else {
            let p = config.required_params(&spec)?;
            p.validate_for_filtering(&spec)?;
            Some(p)
        };
        Ok(Self { kind, spec, prior, params, lw: LwConfig::new(config.filter.delta)?, filter: config.filter_config()? })
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> dglm_core::Result<ParticleSystem> {
        match self.kind {
            FilterKind::Sis | FilterKind::Sir | FilterKind::Apf => {
                init_particles(&self.prior, &self.spec, &self.filter, rng)
            }
            FilterKind::Lw => init_liu_west(&self.prior, &self.spec, &self.filter, rng),
            FilterKind::Storvik | FilterKind::Pl => init_sufficient(&self.prior, &self.spec, &self.filter, rng),
        }
    }

    /// Parameters shared by every particle (non-learning filters).
    fn shared(&self) -> Option<&ParameterSet> {
        if self.kind.learns_parameters() {
            None
        } else {
            self.params.as_ref()
        }
    }

    fn step(&self, ps: &mut ParticleSystem, y: Option<f64>, rng: &mut ChaCha8Rng) -> dglm_core::Result<()> {
        let spec = &self.spec;
        let source = ParameterSource::Conjugate(&self.prior);
        match (self.kind, y) {
            (FilterKind::Sis, Some(y)) => sis_step(ps, spec, self.fixed(), y, rng),
            (FilterKind::Sir, Some(y)) => sir_step(ps, spec, self.fixed(), y, &self.filter, rng),
            (FilterKind::Apf, Some(y)) => apf_step(ps, spec, self.fixed(), y, &self.filter, rng),
            (FilterKind::Lw, Some(y)) => lw_step(ps, spec, &self.lw, y, &self.filter, rng),
            (FilterKind::Storvik, Some(y)) => storvik_step(ps, spec, source, y, &self.filter, rng),
            (FilterKind::Pl, Some(y)) => pl_step(ps, spec, source, y, &self.filter, rng),
            (FilterKind::Sis | FilterKind::Sir | FilterKind::Apf, None) => {
                propagate_only_step(ps, spec, self.fixed(), rng)
            }
            (FilterKind::Lw, None) => learning_propagate_step(ps, spec, None, rng),
            (FilterKind::Storvik | FilterKind::Pl, None) => learning_propagate_step(ps, spec, Some(source), rng),
        }
    }

    fn fixed(&self) -> &ParameterSet {
        self.params.as_ref().expect("non-learning filters carry fixed parameters")
    }

    fn missing_step(&self, ps: &mut ParticleSystem, rng: &mut ChaCha8Rng) -> dglm_core::Result<()> {
        self.step(ps, None, rng)
    }
}

fn state_summaries(ps: &ParticleSystem) -> Result<Vec<Summary>, CliError> {
    let w = ps.weights().weights();
    let m = ps.dim();
    (0..m)
        .map(|k| {
            let column: Vec<f64> = ps.states().iter().skip(k).step_by(m).copied().collect();
            Ok(summary::summarize(&column, &w)?)
        })
        .collect()
}

fn param_columns(ps: &ParticleSystem, fixed: Option<&ParameterSet>) -> Vec<Vec<f64>> {
    if let Some(cloud) = ps.params() {
        let rows: Vec<_> = (0..cloud.len()).map(|i| cloud.summary_values(i)).collect();
        let d = rows.first().map_or(0, |r| r.len());
        (0..d).map(|k| rows.iter().map(|r| r[k]).collect()).collect()
    } else if let Some(p) = fixed {
        p.w.diagonal_entries().iter().chain(p.v.iter()).map(|v| vec![*v]).collect()
    } else {
        Vec::new()
    }
}

fn param_summaries(ps: &ParticleSystem, fixed: Option<&ParameterSet>) -> Result<Vec<Summary>, CliError> {
    let columns = param_columns(ps, fixed);
    let w = if ps.params().is_some() { ps.weights().weights() } else { vec![1.0] };
    columns.iter().map(|c| Ok(summary::summarize(c, &w)?)).collect()
}

/// Streams the series through the configured filter.
pub fn run_filter(config: &RunConfig, series: &TimeSeries) -> Result<RunReport, CliError> {
    let runner = Runner::new(config)?;
    series.validate_for(runner.spec.family())?;
    let seed = config.io.seed;
    let mut rng = stream_rng(seed, STREAM_FILTER);
    let mut pred_rng = stream_rng(seed, STREAM_ONE_STEP);
    let one_step = config.forecast.as_ref().is_some_and(|f| f.one_step);
    let timing = config.io.timing;

    let mut ps = runner.init(&mut rng)?;
    let names = param_names(&runner.spec);
    let mut records = Vec::with_capacity(series.len());
    let mut footer = Footer::default();
    for obs in series.iter() {
        let y_hat =
            if one_step { Some(one_step_prediction(&ps, &runner.spec, runner.shared(), &mut pred_rng)?) } else { None };
        let started = Instant::now();
        match runner.step(&mut ps, obs.y, &mut rng) {
            Ok(()) => {}
            Err(Error::WeightCollapse) => match config.filter.on_collapse {
                CollapsePolicy::Abort => {
                    return Err(CliError::Numerical(format!("particle weights collapsed at t = {}", obs.t)))
                }
                CollapsePolicy::Reset => {
                    ps.reset_weights();
                    runner.missing_step(&mut ps, &mut rng)?;
                    footer.resets.push(obs.t);
                }
            },
            Err(e) => return Err(CliError::from(e)),
        }
        let time_ms = if timing { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        footer.total_ms += time_ms;
        records.push(StepRecord {
            t: obs.t,
            y: obs.y,
            ess: ps.ess_trace().last().copied().unwrap_or_else(|| ps.ess()),
            states: state_summaries(&ps)?,
            params: param_summaries(&ps, runner.shared())?,
            time_ms,
            y_hat,
        });
    }
    if !records.is_empty() {
        footer.mean_iteration_ms = footer.total_ms / records.len() as f64;
    }

    if runner.kind.learns_parameters() {
        let w = ps.weights().weights();
        for (name, column) in names.iter().zip(param_columns(&ps, None)) {
            let var = summary::weighted_variance(&column, &w)?;
            if var < COLLAPSE_VARIANCE {
                footer.collapsed.push(name.clone());
            }
            footer.final_param_variance.push(var);
        }
    }

    if one_step && records.iter().any(|r| r.y.is_some()) {
        let preds: Vec<f64> = records.iter().map(|r| r.y_hat.unwrap_or(f64::NAN)).collect();
        footer.one_step_mse = Some(one_step_forecast_mse(series, &preds)?);
    }

    let forecast = match &config.forecast {
        Some(f) => {
            let mut frng = stream_rng(seed, STREAM_FORECAST);
            let band = forecast_states(&ps, &runner.spec, runner.shared(), f.horizon, &mut frng)?;
            let band = forecast_observations(band, &runner.spec, &mut frng)?;
            let rows = (1..=f.horizon)
                .map(|tau| {
                    Ok(ForecastRecord {
                        tau,
                        states: band.state_summary(tau)?,
                        observation: band.observation_summary(tau)?.expect("observations drawn"),
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            Some(rows)
        }
        None => None,
    };

    let pmmh = run_pmmh_inner(config, &runner.spec, &runner.prior, series)?;
    let reference = match (&pmmh, &config.io.reference) {
        (Some(p), _) => p.trace.reference_trajectory(),
        (None, Some(path)) => Some(aligned_reference(path, series, runner.spec.state_dim())?),
        (None, None) => None,
    };
    if let Some(reference) = reference {
        let estimate: Vec<DVector<f64>> =
            records.iter().map(|r| DVector::from_iterator(r.states.len(), r.states.iter().map(|s| s.mean))).collect();
        if !estimate.is_empty() {
            footer.state_mse = Some(state_mse(&estimate, &reference)?);
        }
    }

    Ok(RunReport {
        config: config.clone(),
        state_dim: runner.spec.state_dim(),
        param_names: names,
        records,
        forecast,
        pmmh,
        footer,
    })
}

fn aligned_reference(path: &std::path::Path, series: &TimeSeries, dim: usize) -> Result<Vec<DVector<f64>>, CliError> {
    let rows = parse_reference(path, dim)?;
    if rows.len() != series.len() || rows.iter().zip(series.iter()).any(|((t, _), o)| *t != o.t) {
        return Err(CliError::Input {
            path: path.to_path_buf(),
            message: "reference rows must match the series time indices".into(),
        });
    }
    Ok(rows.into_iter().map(|(_, v)| v).collect())
}

fn run_pmmh_inner(
    config: &RunConfig,
    spec: &ModelSpec,
    prior: &PriorSpec,
    series: &TimeSeries,
) -> Result<Option<PmmhOutcome>, CliError> {
    let Some(cfg) = config.pmmh_config(spec, prior)? else { return Ok(None) };
    let mut rng = stream_rng(config.io.seed, STREAM_PMMH);
    let mut estimator = SmcLikelihood { n_particles: cfg.n_particles, resampler: cfg.resampler };
    let trace = pmmh_run(series, spec, prior, &cfg, &mut estimator, &mut rng)?;
    Ok(Some(PmmhOutcome { config: cfg, names: param_names(spec), trace }))
}

/// Runs only the PMMH block of a configuration.
pub fn run_pmmh(config: &RunConfig, series: &TimeSeries) -> Result<PmmhOutcome, CliError> {
    let spec = config.model_spec()?;
    let prior = config.prior_spec(&spec)?;
    series.validate_for(spec.family())?;
    run_pmmh_inner(config, &spec, &prior, series)?
        .ok_or_else(|| CliError::Config("this run needs a [pmmh] block".into()))
}

/// Simulates a series of `simulate.length` from the `[params]` block.
pub fn run_simulation(config: &RunConfig) -> Result<Simulation, CliError> {
    let spec = config.model_spec()?;
    let prior = config.prior_spec(&spec)?;
    let params = config.required_params(&spec)?;
    let len = config
        .simulate
        .as_ref()
        .map(|s| s.length)
        .ok_or_else(|| CliError::Config("this run needs a [simulate] block".into()))?;
    let mut rng = stream_rng(config.io.seed, STREAM_SIMULATE);
    Ok(simulate(&spec, &params, &prior, len, &mut rng)?)
}
