//! Particle filtering, online parameter learning and forecasting for
//! dynamic generalised linear models.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dist;
pub mod error;
pub mod filters;
pub mod forecast;
pub mod kalman;
pub mod learning;
pub mod model;
pub mod pmmh;
pub mod resampling;
pub mod summary;

pub use dist::{InverseGamma, InverseWishart};
pub use error::{Error, Result};
pub use filters::{
    apf_step, init_particles, propagate_only_step, sir_step, sis_step, FilterConfig, ParticleSystem, ResamplePolicy,
};
pub use forecast::{forecast_observations, forecast_states, one_step_forecast_mse, state_mse, ForecastBand};
pub use kalman::{kalman_filter, kalman_forecast, kalman_step, KalmanOutput, KalmanState};
pub use learning::{
    draw_parameters, init_frozen, init_liu_west, init_sufficient, learning_propagate_step, lw_shrink_locations,
    lw_step, parameter_posterior, pl_step, storvik_step, update_suffstats, LwConfig, ParamCloud, ParameterSource,
    SufficientStatistics,
};
pub use model::{
    build_structure, observation_logdensity, propagate_state, sample_observation, simulate, Component, Family,
    ModelSpec, Observation, ParameterSet, PriorSpec, Simulation, StateNoise, Structure, TimeSeries, WPrior,
};
pub use pmmh::{
    estimate_loglik, pmmh_run, KalmanLikelihood, LikelihoodEstimator, PmmhConfig, PmmhTrace, SmcLikelihood,
};
pub use resampling::{ess, normalize_log_weights, Resampler, WeightVector};
pub use summary::Summary;
