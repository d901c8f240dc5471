//! Exact filtering for the Normal DLM. Used as the reference answer for the
//! particle filters and as an exact likelihood inside PMMH.

use nalgebra::{DMatrix, DVector};

use crate::dist::{self, LN_2PI};
use crate::error::{Error, Result};
use crate::model::{Family, ModelSpec, ParameterSet, PriorSpec, TimeSeries};

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Running `ln p(y_{1:t} | Φ)`.
    pub loglik: f64,
}

impl KalmanState {
    pub fn from_prior(prior: &PriorSpec) -> Self {
        Self { mean: prior.m0.clone(), cov: prior.c0.clone(), loglik: 0.0 }
    }
}

fn check_normal(spec: &ModelSpec, params: &ParameterSet) -> Result<f64> {
    if spec.family() != Family::Normal {
        return Err(Error::InvalidModel("the Kalman filter needs the Normal family".into()));
    }
    params.validate(spec)?;
    params.v.ok_or_else(|| Error::InvalidParameters("Normal family requires V".into()))
}

/// One predict/update cycle. A missing observation performs the prediction
/// only and leaves the likelihood untouched.
pub fn kalman_step(
    state: &KalmanState,
    spec: &ModelSpec,
    params: &ParameterSet,
    y: Option<f64>,
) -> Result<KalmanState> {
    let v = check_normal(spec, params)?;
    kalman_step_unchecked(state, spec, &params.w.to_matrix(), v, y)
}

fn kalman_step_unchecked(
    state: &KalmanState,
    spec: &ModelSpec,
    w: &DMatrix<f64>,
    v: f64,
    y: Option<f64>,
) -> Result<KalmanState> {
    let g = spec.evolution();
    let a = g * &state.mean;
    let mut r = g * &state.cov * g.transpose() + w;
    dist::symmetrize(&mut r);
    let Some(y) = y else {
        return Ok(KalmanState { mean: a, cov: r, loglik: state.loglik });
    };
    let f = spec.obs_vector();
    let rf = &r * f;
    let forecast = f.dot(&a);
    let q = f.dot(&rf) + v;
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::Numerical(format!("one-step forecast variance {q} is not positive")));
    }
    let err = y - forecast;
    let mean = a + &rf * (err / q);
    let mut cov = r - &rf * rf.transpose() / q;
    dist::symmetrize(&mut cov);
    let loglik = state.loglik - 0.5 * (LN_2PI + q.ln() + err * err / q);
    Ok(KalmanState { mean, cov, loglik })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KalmanOutput {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

/// Folds [`kalman_step`] over the series; the log-likelihood is the
/// prediction-error decomposition.
pub fn kalman_filter(
    series: &TimeSeries,
    spec: &ModelSpec,
    params: &ParameterSet,
    prior: &PriorSpec,
) -> Result<KalmanOutput> {
    let v = check_normal(spec, params)?;
    prior.validate(spec)?;
    let w = params.w.to_matrix();
    let mut state = KalmanState::from_prior(prior);
    let mut out =
        KalmanOutput { means: Vec::with_capacity(series.len()), covs: Vec::with_capacity(series.len()), loglik: 0.0 };
    for obs in series.iter() {
        state = kalman_step_unchecked(&state, spec, &w, v, obs.y)?;
        out.means.push(state.mean.clone());
        out.covs.push(state.cov.clone());
    }
    out.loglik = state.loglik;
    Ok(out)
}

/// Predict-only recursion: state means and covariances for `t+1, …, t+k`.
pub fn kalman_forecast(
    state: &KalmanState,
    spec: &ModelSpec,
    params: &ParameterSet,
    k: usize,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let v = check_normal(spec, params)?;
    let w = params.w.to_matrix();
    let mut cur = state.clone();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        cur = kalman_step_unchecked(&cur, spec, &w, v, None)?;
        out.push((cur.mean.clone(), cur.cov.clone()));
    }
    Ok(out)
}
