//! Machinery for the constrained moment space: the space of square-integrable
//! functions of (Z, A, X) whose conditional mean given (Z_{-nu}, X) vanishes
//! for every subset nu of at least gamma proxy indices.
//!
//! Three routes into the space live here:
//! - [`ReferenceLaw::project_closed_form`]: exact change-of-measure map on a
//!   discrete law, driven by the [`AlphaCoefficients`] recursion. This is the
//!   test oracle.
//! - [`SubsetProjector::project`]: the cyclic fitted-regression algorithm used
//!   by the estimators on samples.
//! - [`SubsetProjector::membership_residuals`]: the empirical membership
//!   diagnostic.

mod ace;
mod family;
mod law;

pub use ace::{
    membership_residuals, project_ace, AceBasis, AceConfig, AceWorkingModel, SubsetProjector,
};
pub use family::{binomial, AlphaCoefficients, SubsetFamily};
pub use law::{LawPoint, ReferenceLaw};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("gamma={gamma} out of range 1..={k}")]
    GammaOutOfRange { gamma: usize, k: usize },
    #[error("invalid discrete law: {0}")]
    InvalidLaw(String),
    #[error("reference law is not absolutely continuous w.r.t. the true law")]
    AbsoluteContinuity,
    #[error("zero-probability cell at support point {point}; full support required")]
    ZeroCell { point: usize },
    #[error("design has {needed} columns but only {n} rows are available")]
    InsufficientRows { needed: usize, n: usize },
}
