//! Closed-form reference computations: linear-Gaussian marginal likelihoods
//! and posteriors, and discrete information measures.

pub mod information;
pub mod linalg;
pub mod linear_gaussian;

use thiserror::Error;

use crate::net::ModelError;

pub use information::DiscreteJoint;
pub use linalg::{mvn_log_density, Cholesky};
pub use linear_gaussian::{
    elbo_gap, install_exact_decoders, install_true_posterior, ElboGap, GapConfig, GaussianPosterior, LinearEmission,
    LinearGaussianModel, Observation, PosteriorMap,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("modality {0:?} has non-positive noise variance")]
    NonPositiveNoise(String),
    #[error("observation is missing modality {0:?}")]
    MissingModality(String),
    #[error("invalid probability table: {0}")]
    InvalidTable(String),
    #[error("VI forms disagree: entropy form {entropy_form}, conditional form {conditional_form}")]
    ViFormsDisagree { entropy_form: f64, conditional_form: f64 },
    #[error("cannot represent in the bundle: {0}")]
    Unrepresentable(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}
