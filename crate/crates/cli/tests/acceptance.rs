//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any criterion fails.
//!
//! Run with `cargo test --release -p dglm-cli --test acceptance`; pass
//! criterion numbers as arguments (`-- 4 7`) to run a subset.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dglm_cli::config::RunConfig;
use dglm_cli::csvio::{parse_csv, parse_csv_str, series_to_csv};
use dglm_cli::driver::run_filter;
use dglm_cli::report::emit_report;
use dglm_core::learning::{
    init_liu_west, init_sufficient, lw_jitter, lw_shrink_locations, parameter_posterior, ParameterSource,
};
use dglm_core::pmmh::SmcLikelihood;
use dglm_core::resampling::{counts, stratified_draws, systematic_draws};
use dglm_core::{
    apf_step, draw_parameters, ess, estimate_loglik, init_particles, kalman_filter, kalman_forecast, lw_step,
    normalize_log_weights, pl_step, pmmh_run, simulate, sir_step, storvik_step, update_suffstats, Component, Family,
    FilterConfig, InverseGamma, KalmanLikelihood, KalmanState, LwConfig, ModelSpec, ParameterSet, ParticleSystem,
    PmmhConfig, PriorSpec, Resampler, Simulation, SufficientStatistics, TimeSeries, WPrior, WeightVector,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Check);

fn gate(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- models

fn level_normal() -> (ModelSpec, ParameterSet, PriorSpec) {
    let spec = ModelSpec::from_components(Family::Normal, &[Component::LocallyConstant]).unwrap();
    let params = ParameterSet::diagonal(&[0.1], Some(1.0));
    let prior = PriorSpec::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0))
        .with_w_prior(WPrior::Diagonal(vec![InverseGamma::new(2.0, 0.2).unwrap()]))
        .with_v_prior(InverseGamma::new(2.0, 2.0).unwrap());
    (spec, params, prior)
}

fn simulate_seeded(spec: &ModelSpec, params: &ParameterSet, prior: &PriorSpec, len: usize, seed: u64) -> Simulation {
    simulate(spec, params, prior, len, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn observed(series: &TimeSeries) -> Vec<f64> {
    series.values().map(|y| y.expect("simulated series are complete")).collect()
}

/// Filtered means from a fixed-parameter filter.
fn filtered_means(
    step: fn(
        &mut ParticleSystem,
        &ModelSpec,
        &ParameterSet,
        f64,
        &FilterConfig,
        &mut ChaCha8Rng,
    ) -> dglm_core::Result<()>,
    ys: &[f64],
    spec: &ModelSpec,
    params: &ParameterSet,
    prior: &PriorSpec,
    n: usize,
    seed: u64,
) -> (Vec<f64>, ParticleSystem) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FilterConfig::new(n, seed);
    let mut ps = init_particles(prior, spec, &cfg, &mut rng).unwrap();
    let mut means = Vec::with_capacity(ys.len());
    for y in ys {
        step(&mut ps, spec, params, *y, &cfg, &mut rng).unwrap();
        means.push(ps.weighted_mean()[0]);
    }
    (means, ps)
}

fn sir(
    ps: &mut ParticleSystem,
    s: &ModelSpec,
    p: &ParameterSet,
    y: f64,
    c: &FilterConfig,
    r: &mut ChaCha8Rng,
) -> dglm_core::Result<()> {
    sir_step(ps, s, p, y, c, r)
}

fn apf(
    ps: &mut ParticleSystem,
    s: &ModelSpec,
    p: &ParameterSet,
    y: f64,
    c: &FilterConfig,
    r: &mut ChaCha8Rng,
) -> dglm_core::Result<()> {
    apf_step(ps, s, p, y, c, r)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Upper tail `P(X ≥ k)` of Binomial(n, 1/2).
fn binomial_upper_half(n: u32, k: u32) -> f64 {
    let mut choose = 1.0f64;
    let mut tail = 0.0;
    for i in 0..=n {
        if i > 0 {
            choose = choose * (n - i + 1) as f64 / i as f64;
        }
        if i >= k {
            tail += choose;
        }
    }
    tail / 2f64.powi(n as i32)
}

/// Asymptotic two-sample Kolmogorov-Smirnov p-value with the usual
/// small-sample correction of the scaled statistic.
fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

// ---------------------------------------------------------------- criteria

const C1_SEED: u64 = 2024;

fn c1_kalman_equivalence() -> Check {
    let (spec, params, prior) = level_normal();
    let sim = simulate_seeded(&spec, &params, &prior, 200, C1_SEED);
    let ys = observed(&sim.series);
    let exact = kalman_filter(&sim.series, &spec, &params, &prior).unwrap();
    let mut detail = Vec::new();
    let mut ok = true;
    for (name, step) in [("sir", sir as _), ("apf", apf as _)] {
        let started = Instant::now();
        let (means, _) = filtered_means(step, &ys, &spec, &params, &prior, 10_000, 1);
        let secs = started.elapsed().as_secs_f64();
        let err = means.iter().zip(&exact.means).map(|(a, b)| (a - b[0]).abs()).sum::<f64>() / 200.0;
        ok &= err <= 0.05 && secs <= 10.0;
        detail.push(format!("{name}: mean |err| {err:.4} (≤ 0.05) in {secs:.2}s (≤ 10s)"));
    }
    gate(ok, detail.join("; "))
}

fn c2_monte_carlo_rate() -> Check {
    let (spec, params, prior) = level_normal();
    let sim = simulate_seeded(&spec, &params, &prior, 200, C1_SEED);
    let ys = observed(&sim.series);
    let exact = kalman_filter(&sim.series, &spec, &params, &prior).unwrap();
    let rmse = |n: usize, seed: u64| {
        let (means, _) = filtered_means(sir, &ys, &spec, &params, &prior, n, seed);
        (means.iter().zip(&exact.means).map(|(a, b)| (a - b[0]).powi(2)).sum::<f64>() / 200.0).sqrt()
    };
    let small: Vec<f64> = (0..20).map(|s| rmse(1000, 100 + s)).collect();
    let large: Vec<f64> = (0..20).map(|s| rmse(4000, 200 + s)).collect();
    let ratio = mean(&small) / mean(&large);
    gate(
        (1.5..=2.7).contains(&ratio),
        format!("RMSE(1000) {:.4} / RMSE(4000) {:.4} = {ratio:.3} (in [1.5, 2.7])", mean(&small), mean(&large)),
    )
}

fn c3_likelihood_oracle() -> Check {
    let (spec, params, prior) = level_normal();
    let sim = simulate_seeded(&spec, &params, &prior, 100, 303);
    let exact = kalman_filter(&sim.series, &spec, &params, &prior).unwrap().loglik;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let diffs: Vec<f64> = (0..20)
        .map(|_| estimate_loglik(&sim.series, &spec, &prior, &params, 10_000, &mut rng).unwrap() - exact)
        .collect();
    let mean_abs = diffs.iter().map(|d| d.abs()).sum::<f64>() / 20.0;
    let positive = diffs.iter().filter(|d| **d > 0.0).count() as u32;
    let p = binomial_upper_half(20, positive);
    gate(
        mean_abs <= 0.5 && p > 0.01,
        format!("mean |ℓ̂ - ℓ| {mean_abs:.4} (≤ 0.5); {positive}/20 positive, sign-test p {p:.3} (> 0.01)"),
    )
}

fn random_weights(rng: &mut ChaCha8Rng) -> WeightVector {
    let len = rng.random_range(2..=20);
    let raw: Vec<f64> = (0..len)
        .map(|_| if rng.random::<f64>() < 0.1 { f64::NEG_INFINITY } else { 3.0 * rng.sample::<f64, _>(StandardNormal) })
        .collect();
    normalize_log_weights(&raw).unwrap_or_else(|_| WeightVector::uniform(len))
}

fn c4_resamplers() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut sys_bad, mut strat_bad, mut worst_strat) = (0, 0, 0.0f64);
    for n_out in [4usize, 16, 100] {
        for _ in 0..1000 {
            let w = random_weights(&mut rng);
            let probs = w.weights();
            let sys = counts(&systematic_draws(&w, n_out, &mut rng), w.len());
            let strat = counts(&stratified_draws(&w, n_out, &mut rng), w.len());
            for ((p, s), t) in probs.iter().zip(&sys).zip(&strat) {
                let expected = n_out as f64 * p;
                let c = *s as f64;
                if c != expected.floor() && c != expected.ceil() {
                    sys_bad += 1;
                }
                let dev = (*t as f64 - expected).abs();
                worst_strat = worst_strat.max(dev);
                if dev >= 2.0 {
                    strat_bad += 1;
                }
            }
        }
    }
    let w = normalize_log_weights(&[0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]).unwrap();
    let (reps, n_out) = (100_000usize, 10usize);
    let mut totals = [0usize; 3];
    for _ in 0..reps {
        for (t, c) in totals.iter_mut().zip(counts(&Resampler::Multinomial.draw(&w, n_out, &mut rng), 3)) {
            *t += c;
        }
    }
    let mut worst_z = 0.0f64;
    for (t, p) in totals.iter().zip([0.7, 0.2, 0.1]) {
        let se = (n_out as f64 * p * (1.0 - p) / reps as f64).sqrt();
        worst_z = worst_z.max((*t as f64 / reps as f64 - n_out as f64 * p).abs() / se);
    }
    gate(
        sys_bad == 0 && strat_bad == 0 && worst_z < 4.0,
        format!(
            "systematic floor/ceil violations {sys_bad}; stratified max |dev| {worst_strat:.3} (< 2); multinomial max z {worst_z:.2} (< 4)"
        ),
    )
}

fn c5_ess_cases() -> Check {
    let uniform = ess(&WeightVector::uniform(1000));
    let atom = ess(&normalize_log_weights(&[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]).unwrap());
    let half = ess(&normalize_log_weights(&[0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bounded = (0..1000).all(|_| {
        let w = random_weights(&mut rng);
        let e = ess(&w);
        (1.0..=w.len() as f64).contains(&e)
    });
    gate(
        uniform == 1000.0 && atom == 1.0 && half == 2.0 && bounded,
        format!("uniform {uniform}, single atom {atom}, (1/2,1/2,0,0) {half}, bounds held: {bounded}"),
    )
}

fn c6_liu_west_moments() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 100_000;
    let mu = [1.0, -2.0];
    let chol = DMatrix::from_row_slice(2, 2, &[0.7, 0.0, 0.15, 0.4]);
    let mut draws = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &chol * z;
        draws.extend([mu[0] + x[0], mu[1] + x[1]]);
    }
    let mut ok = true;
    let mut detail = Vec::new();
    for delta in [0.95, 0.98, 0.99] {
        let cfg = LwConfig::new(delta).unwrap();
        let shrink = lw_shrink_locations(&draws, 2, &WeightVector::uniform(n), &cfg).unwrap();
        let jittered = lw_jitter(&shrink, &cfg, &mut rng).unwrap();
        let mut worst_mean = 0.0f64;
        let mut worst_var = 0.0f64;
        for k in 0..2 {
            let col: Vec<f64> = jittered.iter().skip(k).step_by(2).copied().collect();
            worst_mean = worst_mean.max((mean(&col) - shrink.mean[k]).abs() / shrink.mean[k].abs());
            worst_var = worst_var.max((variance(&col) / shrink.variance[(k, k)] - 1.0).abs());
        }
        ok &= worst_mean <= 0.01 && worst_var <= 0.02;
        detail.push(format!(
            "δ={delta}: mean rel err {:.2}% var rel err {:.2}%",
            100.0 * worst_mean,
            100.0 * worst_var
        ));
    }
    gate(ok, detail.join("; "))
}

fn c7_conjugate_update() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = ModelSpec::from_components(Family::Normal, &[Component::LocallyConstant]).unwrap();
    let mut mismatches = 0;
    for _ in 0..50 {
        // Quarter-integer hyperparameters and eighth-integer states keep every
        // sum exact in binary floating point.
        let a_w = rng.random_range(1..40) as f64 / 4.0;
        let b_w = rng.random_range(1..40) as f64 / 4.0;
        let a_v = rng.random_range(1..40) as f64 / 4.0;
        let b_v = rng.random_range(1..40) as f64 / 4.0;
        let prior = PriorSpec::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0))
            .with_w_prior(WPrior::Diagonal(vec![InverseGamma::new(a_w, b_w).unwrap()]))
            .with_v_prior(InverseGamma::new(a_v, b_v).unwrap());
        let n = rng.random_range(0..30);
        let mut s = SufficientStatistics::new(1, false);
        let (mut sum_inc, mut sum_res, mut n_res) = (0i64, 0i64, 0i64);
        let mut prev = rng.random_range(-40i64..40);
        for _ in 0..n {
            let theta = prev + rng.random_range(-20i64..20);
            let y = (rng.random::<f64>() < 0.8).then(|| theta + rng.random_range(-20i64..20));
            s = update_suffstats(&s, &spec, &[theta as f64 / 8.0], &[prev as f64 / 8.0], y.map(|y| y as f64 / 8.0))
                .unwrap();
            sum_inc += (theta - prev).pow(2);
            if let Some(y) = y {
                sum_res += (y - theta).pow(2);
                n_res += 1;
            }
            prev = theta;
        }
        // Hand computation in integers: ½Σ(d/8)² = Σd² / 128.
        let hand_w = InverseGamma { shape: a_w + n as f64 / 2.0, scale: b_w + sum_inc as f64 / 128.0 };
        let hand_v = InverseGamma { shape: a_v + n_res as f64 / 2.0, scale: b_v + sum_res as f64 / 128.0 };
        let post = parameter_posterior(&s, &prior).unwrap();
        if post.w != WPrior::Diagonal(vec![hand_w]) || post.v != Some(hand_v) {
            mismatches += 1;
        }
        // The sampler draws from exactly those distributions, in order.
        let seed = rng.random::<u64>();
        let drawn = draw_parameters(&s, &prior, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let direct = ParameterSet::diagonal(&[hand_w.sample(&mut r)], Some(hand_v.sample(&mut r)));
        if drawn != direct {
            mismatches += 1;
        }
    }
    gate(mismatches == 0, format!("{mismatches} mismatches over 50 random statistics"))
}

fn poisson_level() -> (ModelSpec, ParameterSet, PriorSpec) {
    let spec = ModelSpec::from_components(Family::Poisson, &[Component::LocallyConstant]).unwrap();
    let params = ParameterSet::diagonal(&[0.01], None);
    let prior = PriorSpec::new(DVector::from_element(1, 3.0), DMatrix::from_element(1, 1, 0.5))
        .with_w_prior(WPrior::Diagonal(vec![InverseGamma::new(1.0, 0.05).unwrap()]));
    (spec, params, prior)
}

fn learned_w(kind: &str, ys: &[f64], spec: &ModelSpec, prior: &PriorSpec, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FilterConfig::new(n, seed);
    let mut ps = init_sufficient(prior, spec, &cfg, &mut rng).unwrap();
    let source = ParameterSource::Conjugate(prior);
    for y in ys {
        match kind {
            "storvik" => storvik_step(&mut ps, spec, source, *y, &cfg, &mut rng).unwrap(),
            _ => pl_step(&mut ps, spec, source, *y, &cfg, &mut rng).unwrap(),
        }
    }
    let cloud = ps.params().unwrap();
    let w = ps.weights().weights();
    (0..cloud.len()).map(|i| w[i] * cloud.summary_values(i)[0]).sum()
}

fn c8_parameter_recovery() -> Check {
    let (spec, truth, prior) = poisson_level();
    let sim = simulate_seeded(&spec, &truth, &prior, 500, 808);
    let ys = observed(&sim.series);
    let storvik = learned_w("storvik", &ys, &spec, &prior, 5000, 81);
    let pl = learned_w("pl", &ys, &spec, &prior, 5000, 82);

    let started = Instant::now();
    let cfg = PmmhConfig::new(ParameterSet::diagonal(&[0.02], None), 5000, 500)
        .with_burn_in(1000)
        .with_step_covariance(DMatrix::from_element(1, 1, 0.3f64.powi(2)));
    let mut est = SmcLikelihood { n_particles: cfg.n_particles, resampler: Resampler::Systematic };
    let trace = pmmh_run(&sim.series, &spec, &prior, &cfg, &mut est, &mut ChaCha8Rng::seed_from_u64(83)).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let mut draws: Vec<f64> = trace.retained().map(|p| p.w.diagonal_entries()[0]).collect();
    draws.sort_by(f64::total_cmp);
    let (lo, hi) = (quantile(&draws, 0.025), quantile(&draws, 0.975));
    let w0 = truth.w.diagonal_entries()[0];
    let within = |e: f64| e >= w0 / 2.0 && e <= w0 * 2.0 && e >= lo && e <= hi;
    gate(
        within(storvik) && within(pl) && secs <= 600.0,
        format!(
            "truth {w0}; Storvik {storvik:.4}, PL {pl:.4}; PMMH 95% CI [{lo:.4}, {hi:.4}] (acceptance {:.2}, {secs:.1}s ≤ 600s)",
            trace.acceptance_rate()
        ),
    )
}

fn c9_pseudo_marginal() -> Check {
    let spec = ModelSpec::from_components(Family::Normal, &[Component::LocallyConstant]).unwrap();
    let truth = ParameterSet::diagonal(&[0.2], Some(1.0));
    let prior = PriorSpec::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0))
        .with_w_prior(WPrior::Diagonal(vec![InverseGamma::new(2.0, 0.2).unwrap()]))
        .with_v_prior(InverseGamma::new(2.0, 1.0).unwrap());
    let sim = simulate_seeded(&spec, &truth, &prior, 30, 909);
    // Only W moves: the V coordinate has zero step variance.
    let step = DMatrix::from_diagonal(&DVector::from_vec(vec![0.9f64.powi(2), 0.0]));
    let (kept, thin, burn) = (5000, 40, 2000);
    let cfg = PmmhConfig::new(truth.clone(), burn + kept * thin, 2)
        .with_burn_in(burn)
        .with_thin(thin)
        .with_step_covariance(step);
    let exact =
        pmmh_run(&sim.series, &spec, &prior, &cfg, &mut KalmanLikelihood, &mut ChaCha8Rng::seed_from_u64(91)).unwrap();
    let mut est = SmcLikelihood { n_particles: 100, resampler: Resampler::Systematic };
    let smc_cfg = PmmhConfig { n_particles: 100, ..cfg };
    let smc = pmmh_run(&sim.series, &spec, &prior, &smc_cfg, &mut est, &mut ChaCha8Rng::seed_from_u64(92)).unwrap();
    let a: Vec<f64> = exact.retained().map(|p| p.w.diagonal_entries()[0]).collect();
    let b: Vec<f64> = smc.retained().map(|p| p.w.diagonal_entries()[0]).collect();
    let (d, p) = ks_two_sample(&a, &b);
    gate(
        p > 0.01 && a.len() == kept && b.len() == kept,
        format!(
            "{} vs {} draws, KS D {d:.4}, p {p:.3} (> 0.01); acceptance exact {:.2} / SMC {:.2}",
            a.len(),
            b.len(),
            exact.acceptance_rate(),
            smc.acceptance_rate()
        ),
    )
}

fn run_learning(
    kind: &str,
    ys: &[f64],
    spec: &ModelSpec,
    prior: &PriorSpec,
    n: usize,
    seed: u64,
) -> (ParticleSystem, Duration) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FilterConfig::new(n, seed);
    let source = ParameterSource::Conjugate(prior);
    let lw = LwConfig::default();
    let mut ps = match kind {
        "lw" => init_liu_west(prior, spec, &cfg, &mut rng).unwrap(),
        _ => init_sufficient(prior, spec, &cfg, &mut rng).unwrap(),
    };
    let started = Instant::now();
    for y in ys {
        match kind {
            "lw" => lw_step(&mut ps, spec, &lw, *y, &cfg, &mut rng).unwrap(),
            "storvik" => storvik_step(&mut ps, spec, source, *y, &cfg, &mut rng).unwrap(),
            _ => pl_step(&mut ps, spec, source, *y, &cfg, &mut rng).unwrap(),
        }
    }
    (ps, started.elapsed())
}

fn min_param_variance(ps: &ParticleSystem) -> f64 {
    let cloud = ps.params().unwrap();
    let w = ps.weights().weights();
    let d = cloud.summary_values(0).len();
    (0..d)
        .map(|k| {
            let col: Vec<f64> = (0..cloud.len()).map(|i| cloud.summary_values(i)[k]).collect();
            dglm_core::summary::weighted_variance(&col, &w).unwrap()
        })
        .fold(f64::INFINITY, f64::min)
}

fn c10_orderings() -> Check {
    let (spec, params, prior) = level_normal();
    let mut ess_storvik = Vec::new();
    let mut ess_pl = Vec::new();
    for seed in 0..20u64 {
        let ys = observed(&simulate_seeded(&spec, &params, &prior, 200, 1000 + seed).series);
        ess_storvik.push(mean(run_learning("storvik", &ys, &spec, &prior, 1000, seed).0.ess_trace()));
        ess_pl.push(mean(run_learning("pl", &ys, &spec, &prior, 1000, seed).0.ess_trace()));
    }
    let (es, ep) = (mean(&ess_storvik), mean(&ess_pl));

    let ys = observed(&simulate_seeded(&spec, &params, &prior, 500, 1100).series);
    let best = |kind: &str| {
        (0..3).map(|r| run_learning(kind, &ys, &spec, &prior, 5000, 40 + r).1).min().unwrap().as_secs_f64() * 1e3
            / ys.len() as f64
    };
    let (t_lw, t_st, t_pl) = (best("lw"), best("storvik"), best("pl"));

    // Reported only: small-sample collapse of the kernel filter.
    let long = observed(&simulate_seeded(&spec, &params, &prior, 2000, 1200).series);
    let v_lw = min_param_variance(&run_learning("lw", &long, &spec, &prior, 100, 7).0);
    let v_st = min_param_variance(&run_learning("storvik", &long, &spec, &prior, 100, 7).0);
    let v_pl = min_param_variance(&run_learning("pl", &long, &spec, &prior, 100, 7).0);

    gate(
        ep >= es && t_lw <= t_st && t_lw <= t_pl,
        format!(
            "mean ESS PL {ep:.1} ≥ Storvik {es:.1}; ms/iter LW {t_lw:.3} ≤ Storvik {t_st:.3}, PL {t_pl:.3}; \
             N=100 T=2000 min param variance LW {v_lw:.2e}, Storvik {v_st:.2e}, PL {v_pl:.2e} (LW collapsed: {}, others not: {})",
            v_lw < 1e-6,
            v_st >= 1e-6 && v_pl >= 1e-6
        ),
    )
}

fn c11_forecast() -> Check {
    let (spec, params, prior) = level_normal();
    let sim = simulate_seeded(&spec, &params, &prior, 200, C1_SEED);
    let ys = observed(&sim.series);
    let exact = kalman_filter(&sim.series, &spec, &params, &prior).unwrap();
    let (_, ps) = filtered_means(sir, &ys, &spec, &params, &prior, 10_000, 11);
    let origin = KalmanState { mean: exact.means[199].clone(), cov: exact.covs[199].clone(), loglik: 0.0 };
    let pred = kalman_forecast(&origin, &spec, &params, 50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let band = dglm_core::forecast_states(&ps, &spec, Some(&params), 50, &mut rng).unwrap();
    let err = (1..=50).map(|tau| (band.state_mean(tau)[0] - pred[tau - 1].0[0]).abs()).sum::<f64>() / 50.0;

    let (history, horizon, reps) = (50, 10, 200);
    let mut covered = 0;
    for r in 0..reps {
        let sim = simulate_seeded(&spec, &params, &prior, history + horizon, 5000 + r);
        let ys = observed(&sim.series);
        let (_, ps) = filtered_means(sir, &ys[..history], &spec, &params, &prior, 2000, 6000 + r);
        let band = dglm_core::forecast_observations(
            dglm_core::forecast_states(&ps, &spec, Some(&params), horizon, &mut rng).unwrap(),
            &spec,
            &mut rng,
        )
        .unwrap();
        for tau in 1..=horizon {
            let s = band.observation_summary(tau).unwrap().unwrap();
            let y = ys[history + tau - 1];
            covered += usize::from(s.lo <= y && y <= s.hi);
        }
    }
    let coverage = 100.0 * covered as f64 / (reps as usize * horizon) as f64;
    gate(
        err <= 0.05 && (90.0..=99.0).contains(&coverage),
        format!("k=50 mean |forecast - Kalman| {err:.4} (≤ 0.05); 95% band coverage {coverage:.1}% (in [90, 99])"),
    )
}

const C12_CONFIG: &str = r#"
format_version = 1
[model]
family = "normal"
components = [{ kind = "level" }, { kind = "seasonal", period = 12, harmonics = 1 }]
[prior]
w_shape = [3.0, 3.0, 3.0]
w_scale = [0.2, 0.02, 0.02]
v_shape = 3.0
v_scale = 2.0
[params]
w = [0.1, 0.01, 0.01]
v = 1.0
[filter]
kind = "storvik"
particles = 500
[forecast]
horizon = 12
one_step = true
[simulate]
length = 120
[io]
seed = 1234
timing = false
"#;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn c12_reproducibility_io() -> Check {
    let cfg = RunConfig::from_toml(C12_CONFIG).unwrap();
    let sim = dglm_cli::run_simulation(&cfg).unwrap();
    let values: Vec<Option<f64>> =
        sim.series.values().enumerate().map(|(i, y)| if i % 10 == 4 { None } else { y }).collect();
    let series = TimeSeries::from_values(values).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let csv_path = tmp.path().join("series.csv");
    std::fs::write(&csv_path, series_to_csv(&series)).unwrap();
    let parsed = parse_csv(&csv_path).unwrap();
    let round_trip = parsed == series && parse_csv_str(&series_to_csv(&sim.series)).unwrap() == sim.series;

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    emit_report(&run_filter(&cfg, &parsed).unwrap(), &a, "filter").unwrap();
    emit_report(&run_filter(&cfg, &parsed).unwrap(), &b, "filter").unwrap();
    let identical = dir_bytes(&a) == dir_bytes(&b);

    // The binary, twice, from a config file on disk.
    let conf = tmp.path().join("run.toml");
    std::fs::write(&conf, C12_CONFIG.replace("[io]", "[io]\ninput = \"series.csv\"")).unwrap();
    let bin = env!("CARGO_BIN_EXE_dglm");
    let out = tmp.path().join("bin");
    let run_bin = || {
        std::process::Command::new(bin)
            .args(["filter", "--config"])
            .arg(&conf)
            .arg("--out")
            .arg(&out)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap()
            .success()
    };
    let first = run_bin().then(|| dir_bytes(&out));
    let second = run_bin().then(|| dir_bytes(&out));
    let bin_identical = first.is_some() && first == second;

    let states = std::fs::read_to_string(a.join("states.csv")).unwrap();
    let rows: Vec<Vec<&str>> = states.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let m = 3;
    let columns_ok = rows.iter().all(|r| r.len() == 3 + 3 * m + 1);
    let missing_rows: Vec<usize> = (0..rows.len()).filter(|i| i % 10 == 4).collect();
    let flagged_ok =
        rows.len() == series.len() && rows.iter().enumerate().all(|(i, r)| r[1].is_empty() == (i % 10 == 4));
    // Resampling every step leaves uniform weights for the propagate-only step.
    let uniform_ok = missing_rows.iter().all(|&i| rows[i][2] == "500");
    // Without resampling the weights carry through, so ESS repeats the previous row.
    let sis = RunConfig::from_toml(&C12_CONFIG.replace("\"storvik\"", "\"sis\"")).unwrap();
    let c = tmp.path().join("sis");
    emit_report(&run_filter(&sis, &parsed).unwrap(), &c, "filter").unwrap();
    let sis_states = std::fs::read_to_string(c.join("states.csv")).unwrap();
    let sis_rows: Vec<Vec<&str>> = sis_states.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let carried_ok = missing_rows.iter().all(|&i| sis_rows[i][1].is_empty() && sis_rows[i][2] == sis_rows[i - 1][2]);
    let missing_ok = flagged_ok && uniform_ok && carried_ok;

    gate(
        round_trip && identical && bin_identical && columns_ok && missing_ok,
        format!(
            "CSV round trip exact: {round_trip}; library reruns byte-identical: {identical}; binary reruns byte-identical: {bin_identical}; \
             states.csv has 3+3m+1 columns: {columns_ok}; {} missing rows kept with empty y and unchanged ESS: {missing_ok}",
            missing_rows.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        (1, "Kalman equivalence", c1_kalman_equivalence),
        (2, "Monte Carlo rate", c2_monte_carlo_rate),
        (3, "marginal-likelihood oracle", c3_likelihood_oracle),
        (4, "resampler correctness", c4_resamplers),
        (5, "ESS bounds and exact cases", c5_ess_cases),
        (6, "Liu-West moment preservation", c6_liu_west_moments),
        (7, "conjugate-update oracle", c7_conjugate_update),
        (8, "Storvik/PL parameter recovery", c8_parameter_recovery),
        (9, "pseudo-marginal exactness", c9_pseudo_marginal),
        (10, "qualitative orderings", c10_orderings),
        (11, "forecast sanity", c11_forecast),
        (12, "reproducibility and IO", c12_reproducibility_io),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {id:>2} {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {id:>2} {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
