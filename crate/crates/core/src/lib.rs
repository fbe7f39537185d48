//! Covariance-steering trajectory synthesis with a stochastic quadrotor simulator.

// Links the system OpenBLAS used by the semidefinite solver.
extern crate openblas_src;

pub mod aero;
pub mod chance;
pub mod covsteer;
pub mod error;
pub mod linalg;
pub mod linsys;
pub mod lqr;
pub mod montecarlo;
pub mod quadsim;
pub mod scenario;
pub mod windekf;

pub use error::{Error, Result};
