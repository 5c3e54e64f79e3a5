//! Numerical substrate: dense factorizations, Gaussian sampling, the incomplete
//! beta function, Sobol points, quadrature, and deterministic random streams.

pub mod beta;
pub mod linalg;
pub mod quadrature;
pub mod rng;
pub mod sobol;

pub use beta::{betainv, confidence_lower_bound, reg_inc_beta};
pub use linalg::{cholesky, mvn_sample, semidefinite_lower, Lu, Matrix, SpdFactor};
pub use quadrature::GaussLegendre;
pub use rng::RngStream;
pub use sobol::sobol_points;
