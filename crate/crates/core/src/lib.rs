//! Hybrid Gaussian-process modelling of partially known dynamic systems.
//!
//! The crate trains GP models of unknown sub-functions inside known dynamics,
//! samples exact GP realizations along closed-loop trajectories, and tunes
//! constraint back-offs for a nominal NMPC so that joint chance constraints hold
//! with a certified confidence bound.
//!
//! Numerical code is generic over [`Scalar`]; the aliases below fix `f64`.

pub mod backoff_engine;
pub mod dual;
pub mod error;
pub mod float_serde;
pub mod gp_core;
pub mod gp_path_sampler;
pub mod hybrid_dynamics;
pub mod map_trainer;
pub mod nmpc;
pub mod num_kernel;
pub mod scalar;

pub use dual::{Dual, Grad};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = num_kernel::Matrix<f64>;
pub type SpdFactor = num_kernel::SpdFactor<f64>;
