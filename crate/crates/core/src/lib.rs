//! Bayesian image-on-scalar regression on spherical meshes.
//!
//! Spatially varying coefficients get Gaussian-process priors whose
//! precisions are approximated with radius-based Vecchia factors.
//! Posterior computation streams the outcome images once into sufficient
//! statistics and then runs a quasi-Newton HMC sampler with Gibbs updates
//! for the variance components.

pub mod error;
pub mod gp;
pub mod harness;
pub mod hyperparam;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod samplers;
pub mod sphere;
pub mod vecchia;

pub use error::{Error, Result};
