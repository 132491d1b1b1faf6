//! Numerical laboratory for invariance-seeking training objectives on a
//! Gaussian latent-variable classification model.
//!
//! The crate provides the generative model (label-conditional Gaussian
//! invariant and environmental features behind an injective observation
//! map), closed-form and quadrature risk evaluation, Monte Carlo estimators
//! with deterministic sharding, the explicit feasible/adversarial predictor
//! constructions, gradient-based trainers for the penalized objectives, and
//! the piecewise ball-gated featurizer used to probe out-of-distribution
//! behavior.

pub mod constructions;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod nonlinear;
pub mod params;
pub mod population;
pub mod predictor;
pub mod quad;
pub mod risk;
pub mod rng;
pub mod trainers;
pub mod verify;

pub use error::{Error, Result};
pub use model::{
    invert_observation, optimal_invariant_predictor, sample_environment, EnvironmentParams,
    EnvironmentSet, InvariantParams, LatentSample, ObservationMap, ScalarMap,
};
pub use population::Objective;
pub use predictor::{LatentPredictor, LinearPredictor};
pub use risk::{
    irm_penalty, logistic_risk_quadrature, mc_logistic_risk, mc_zero_one_risk, risk_variance,
    zero_one_risk_closed, RiskReport,
};
