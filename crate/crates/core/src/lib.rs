//! Estimation of a linear regression with a right-censored or missing covariate:
//! complete-case, inverse-probability-weighted, likelihood-based and augmented estimating
//! equations, sandwich inference and a Monte Carlo harness.

pub mod closed_forms;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod io;
pub mod model;
pub mod nuisance;
pub mod numerics;
pub mod simulation;

pub use closed_forms::{AugKind, Dependence, GaussianConditional, ObservationModel};
pub use error::{CencovError, Result};
pub use estimators::{
    fit_estimator, Dataset, EstimatorKind, EstimatorSpec, FitOptions, FitResult, LambdaMode, NuisanceConfig,
    Problem, ProbabilitySource, PsiMode, Record,
};
pub use model::{CensoredObservation, MeanSpec, MissingObservation, Theta};
pub use nuisance::{MisspecInjector, NuisanceBundle};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
