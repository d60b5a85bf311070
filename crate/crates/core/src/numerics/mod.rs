//! Shared numerical kernels.

pub mod mvn;
pub mod normal;
pub mod quadrature;
pub mod solver;

pub use mvn::{covariance_factor, mvn_draw, mvn_sample};
pub use normal::{log_normal_upper_tail, normal_quantile, normal_upper_tail};
pub use quadrature::{gauss_hermite, GaussHermite};
pub use solver::{numeric_jacobian, solve_estimating_equation, SolveOutcome, SolverConfig};
