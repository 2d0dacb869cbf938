//! Estimation of average treatment effects under unmeasured confounding when
//! some treatment confounding proxies may be invalid.
//!
//! Given K candidate proxies of which at least gamma are assumed valid
//! (without knowing which), the estimators here project instrument functions
//! into the space of (Z, A, X)-functions whose conditional mean vanishes
//! given every complement (Z_{-nu}, X) with |nu| >= gamma, solve parametric
//! bridge-function estimating equations against those instruments, and
//! combine the pieces into outcome-regression, inverse-probability-weighted,
//! and multiply robust point estimators with influence-function or bootstrap
//! inference.
//!
//! Module map:
//! - [`dataset`]: the observed sample, CSV ingestion, bootstrap resampling.
//! - [`projection`]: subset families, the coefficient recursion, the exact
//!   discrete-law projection oracle, and the iterative sample projector.
//! - [`bridges`]: parametric working models h, l, q and instrument vectors.
//! - [`estimators`]: the estimating-equation solvers and the five estimators.
//! - [`inference`]: bootstrap, confidence intervals, Monte Carlo harness.
//! - [`simulation`]: benchmark data-generating processes and the discrete
//!   toy law used by the exact oracles.

pub mod bridges;
pub mod dataset;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod projection;
pub mod rng;
pub mod simulation;
