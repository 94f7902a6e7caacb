//! Regression copula models for distributional regression.
//!
//! The response margin is estimated non-parametrically and the dependence
//! between observations is an implicit Gaussian copula induced by a
//! heteroscedastic pseudo-response regression. Estimation is by MCMC (Gibbs,
//! mode-curvature Metropolis-Hastings and HMC) or by factor-covariance
//! Gaussian variational Bayes.

pub mod copula;
pub mod dependence;
pub mod design;
pub mod error;
pub mod evaluation;
pub mod margins;
pub mod mcmc;
pub mod normal;
pub mod pipeline;
pub mod prediction;
pub mod priors;
pub mod vb;

pub use error::{Error, Result};
