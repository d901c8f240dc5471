//! Report files: `states.csv`, `params.csv`, `forecast.csv`,
//! `onestep.csv`, `pmmh_trace.csv` and `meta.toml`.
//!
//! Every file is written to a temporary file in the output directory and
//! renamed into place, so readers never see a partial report.

use std::io::Write;
use std::path::{Path, PathBuf};

use dglm_core::{LwConfig, Simulation};
use serde::Serialize;

use crate::config::{FilterKind, RunConfig, FORMAT_VERSION};
use crate::csvio::{fmt_f64, series_to_csv};
use crate::driver::{PmmhOutcome, RunReport};
use crate::error::CliError;

pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn summary_header(out: &mut Vec<String>, names: impl IntoIterator<Item = String>) {
    for n in names {
        out.push(format!("{n}_mean"));
        out.push(format!("{n}_lo"));
        out.push(format!("{n}_hi"));
    }
}

fn push_summaries(row: &mut Vec<String>, summaries: &[dglm_core::Summary]) {
    for s in summaries {
        row.push(fmt_f64(s.mean));
        row.push(fmt_f64(s.lo));
        row.push(fmt_f64(s.hi));
    }
}

fn join_lines(header: Vec<String>, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn state_names(m: usize) -> impl Iterator<Item = String> {
    (1..=m).map(|k| format!("theta{k}"))
}

/// `t, y, ess`, then mean/lo/hi per state component, then `time_ms`.
pub fn states_csv(report: &RunReport) -> String {
    let mut header = vec!["t".to_string(), "y".into(), "ess".into()];
    summary_header(&mut header, state_names(report.state_dim));
    header.push("time_ms".into());
    let rows = report.records.iter().map(|r| {
        let mut row = vec![r.t.to_string(), opt(r.y), fmt_f64(r.ess)];
        push_summaries(&mut row, &r.states);
        row.push(fmt_f64(r.time_ms));
        row
    });
    join_lines(header, rows)
}

pub fn params_csv(report: &RunReport) -> String {
    let mut header = vec!["t".to_string()];
    summary_header(&mut header, report.param_names.iter().cloned());
    let rows = report.records.iter().map(|r| {
        let mut row = vec![r.t.to_string()];
        push_summaries(&mut row, &r.params);
        row
    });
    join_lines(header, rows)
}

pub fn forecast_csv(report: &RunReport) -> Option<String> {
    let band = report.forecast.as_ref()?;
    let mut header = vec!["tau".to_string()];
    summary_header(&mut header, state_names(report.state_dim));
    summary_header(&mut header, ["y".to_string()]);
    let rows = band.iter().map(|f| {
        let mut row = vec![f.tau.to_string()];
        push_summaries(&mut row, &f.states);
        push_summaries(&mut row, &[f.observation]);
        row
    });
    Some(join_lines(header, rows))
}

pub fn onestep_csv(report: &RunReport) -> Option<String> {
    if report.records.iter().all(|r| r.y_hat.is_none()) {
        return None;
    }
    let header = vec!["t".to_string(), "y".into(), "y_hat".into()];
    let rows = report.records.iter().map(|r| vec![r.t.to_string(), opt(r.y), opt(r.y_hat)]);
    Some(join_lines(header, rows))
}

pub fn pmmh_csv(outcome: &PmmhOutcome) -> String {
    let mut header = vec!["iteration".to_string(), "loglik".into()];
    header.extend(outcome.names.iter().cloned());
    header.push("retained".into());
    let trace = &outcome.trace;
    let rows = trace.draws.iter().zip(&trace.logliks).enumerate().map(|(i, (d, l))| {
        let mut row = vec![(i + 1).to_string(), fmt_f64(*l)];
        row.extend(d.w.diagonal_entries().iter().chain(d.v.iter()).map(|v| fmt_f64(*v)));
        let retained = i >= trace.burn_in && (i - trace.burn_in).is_multiple_of(trace.thin);
        row.push(u8::from(retained).to_string());
        row
    });
    join_lines(header, rows)
}

/// Simulated truth: `t` then the true state components.
pub fn truth_csv(sim: &Simulation) -> String {
    let m = sim.states.first().map_or(0, |s| s.len());
    let mut header = vec!["t".to_string()];
    header.extend(state_names(m));
    let rows = sim.series.iter().zip(sim.states.iter().skip(1)).map(|(o, s)| {
        let mut row = vec![o.t.to_string()];
        row.extend(s.iter().map(|v| fmt_f64(*v)));
        row
    });
    join_lines(header, rows)
}

#[derive(Serialize)]
struct Meta<'a> {
    format_version: u32,
    generator: Generator,
    run: RunMeta,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<KernelMeta>,
    timing: TimingMeta,
    diagnostics: Diagnostics<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pmmh: Option<PmmhMeta>,
    config: &'a RunConfig,
}

/// Liu-West shrinkage `a` and bandwidth `h` implied by `delta`.
#[derive(Serialize)]
struct KernelMeta {
    delta: f64,
    shrinkage: f64,
    bandwidth: f64,
}

#[derive(Serialize)]
struct Generator {
    name: &'static str,
    version: &'static str,
}

#[derive(Serialize)]
struct RunMeta {
    command: String,
    seed: u64,
    filter: &'static str,
    particles: usize,
    rows: usize,
    state_dim: usize,
}

#[derive(Serialize)]
struct TimingMeta {
    enabled: bool,
    total_ms: f64,
    mean_iteration_ms: f64,
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    mean_ess: f64,
    parameter_names: &'a [String],
    #[serde(skip_serializing_if = "<[f64]>::is_empty")]
    final_param_variance: &'a [f64],
    collapse_warning: bool,
    collapsed_parameters: &'a [String],
    weight_resets: &'a [u64],
    #[serde(skip_serializing_if = "Option::is_none")]
    state_mse: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    one_step_mse: Option<f64>,
}

#[derive(Serialize)]
struct PmmhMeta {
    iterations: usize,
    particles: usize,
    burn_in: usize,
    thin: usize,
    step_sd: Vec<f64>,
    initial: Vec<f64>,
    accepted: usize,
    acceptance_rate: f64,
}

fn pmmh_meta(p: &PmmhOutcome) -> PmmhMeta {
    let c = &p.config;
    PmmhMeta {
        iterations: c.n_iter,
        particles: c.n_particles,
        burn_in: c.burn_in,
        thin: c.thin,
        step_sd: c.step_covariance.diagonal().iter().map(|v| v.sqrt()).collect(),
        initial: c.initial.w.diagonal_entries().iter().chain(c.initial.v.iter()).copied().collect(),
        accepted: p.trace.accepted,
        acceptance_rate: p.trace.acceptance_rate(),
    }
}

pub fn meta_toml(report: &RunReport, command: &str) -> String {
    let f = &report.footer;
    let mean_ess = if report.records.is_empty() {
        0.0
    } else {
        report.records.iter().map(|r| r.ess).sum::<f64>() / report.records.len() as f64
    };
    let meta = Meta {
        format_version: FORMAT_VERSION,
        generator: Generator { name: env!("CARGO_PKG_NAME"), version: env!("CARGO_PKG_VERSION") },
        run: RunMeta {
            command: command.to_string(),
            seed: report.config.io.seed,
            filter: report.config.filter.kind.name(),
            particles: report.config.filter.particles,
            rows: report.records.len(),
            state_dim: report.state_dim,
        },
        kernel: (report.config.filter.kind == FilterKind::Lw)
            .then(|| LwConfig::new(report.config.filter.delta).ok())
            .flatten()
            .map(|lw| KernelMeta { delta: lw.delta(), shrinkage: lw.shrinkage(), bandwidth: lw.bandwidth() }),
        timing: TimingMeta {
            enabled: report.config.io.timing,
            total_ms: f.total_ms,
            mean_iteration_ms: f.mean_iteration_ms,
        },
        diagnostics: Diagnostics {
            mean_ess,
            parameter_names: &report.param_names,
            final_param_variance: &f.final_param_variance,
            collapse_warning: !f.collapsed.is_empty(),
            collapsed_parameters: &f.collapsed,
            weight_resets: &f.resets,
            state_mse: f.state_mse.as_deref(),
            one_step_mse: f.one_step_mse,
        },
        pmmh: report.pmmh.as_ref().map(pmmh_meta),
        config: &report.config,
    };
    toml::to_string(&meta).expect("metadata serialises")
}

pub fn pmmh_meta_toml(outcome: &PmmhOutcome, config: &RunConfig) -> String {
    #[derive(Serialize)]
    struct PmmhOnly<'a> {
        format_version: u32,
        generator: Generator,
        seed: u64,
        pmmh: PmmhMeta,
        config: &'a RunConfig,
    }
    toml::to_string(&PmmhOnly {
        format_version: FORMAT_VERSION,
        generator: Generator { name: env!("CARGO_PKG_NAME"), version: env!("CARGO_PKG_VERSION") },
        seed: config.io.seed,
        pmmh: pmmh_meta(outcome),
        config,
    })
    .expect("metadata serialises")
}

/// Writes every report file into `dir` and returns the paths written.
pub fn emit_report(report: &RunReport, dir: &Path, command: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut files = vec![("states.csv", states_csv(report)), ("params.csv", params_csv(report))];
    if let Some(f) = forecast_csv(report) {
        files.push(("forecast.csv", f));
    }
    if let Some(o) = onestep_csv(report) {
        files.push(("onestep.csv", o));
    }
    if let Some(p) = &report.pmmh {
        files.push(("pmmh_trace.csv", pmmh_csv(p)));
    }
    files.push(("meta.toml", meta_toml(report, command)));
    write_all(dir, files)
}

pub fn emit_pmmh(outcome: &PmmhOutcome, config: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    write_all(dir, vec![("pmmh_trace.csv", pmmh_csv(outcome)), ("meta.toml", pmmh_meta_toml(outcome, config))])
}

pub fn emit_simulation(sim: &Simulation, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    write_all(dir, vec![("series.csv", series_to_csv(&sim.series)), ("truth.csv", truth_csv(sim))])
}

fn write_all(dir: &Path, files: Vec<(&str, String)>) -> Result<Vec<PathBuf>, CliError> {
    files
        .into_iter()
        .map(|(name, contents)| {
            let path = dir.join(name);
            write_atomic(&path, &contents)?;
            Ok(path)
        })
        .collect()
}
