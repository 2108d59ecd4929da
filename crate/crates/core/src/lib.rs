//! Estimation of structural objects in linear random-coefficient models
//! `Y = p(X)' e` with a control variable `V`, via a sieve approximation of
//! the coefficient functions `E[e | V = v]`.
//!
//! The pipeline is:
//!
//! 1. [`simulate`] generates data from known designs (or read a CSV with
//!    [`dataset::Dataset::read_csv`]).
//! 2. [`control`] estimates `V` from a discrete instrument or passes an
//!    observed control through.
//! 3. [`sieve::fit`] runs OLS on the `p(X) (x) psi(V)` design.
//! 4. [`diagnostics::diagnose`] checks the identification conditions.
//! 5. [`montecarlo`] replicates the whole thing over seeds.

pub mod basis;
pub mod cli;
pub mod control;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod montecarlo;
pub mod sieve;
pub mod simulate;
pub mod stats;

pub use basis::BasisSpec;
pub use control::{estimate_control, passthrough_control, ControlEstimate, ControlSource};
pub use dataset::Dataset;
pub use diagnostics::{diagnose, DiagnosticsReport, Tolerances};
pub use error::{Error, Result};
pub use sieve::{fit, FittedModel};
pub use simulate::{simulate, DgpConfig, GroundTruth, Simulation};
