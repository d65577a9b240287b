//! Entropic optimal transport between discrete measures, with the inference
//! layer needed to put error bars on everything the solver produces.
//!
//! The crate is organised bottom-up:
//!
//! * [`measures`] — weighted atom sets, cost tables, sample ingestion and
//!   synthetic sampling.
//! * [`sinkhorn`] — log-domain dual solver, plan densities, entropic /
//!   Sinkhorn costs, Sinkhorn divergence, entropic maps.
//! * [`operators`] — the conditional-expectation operators `A_P`, `A_Q` and
//!   the `(I − A_Q A_P)`-type inverses (truncated Neumann series or a dense
//!   direct solve) that power every variance formula.
//! * [`inference`] — plug-in variance estimators and confidence intervals
//!   for costs, plan functionals, conditional functionals, divergences,
//!   colocalization curves and kernel point estimates.
//! * [`oracle`] — exact finite-population ground truth used by the test
//!   suite and the simulation harness.
//! * [`montecarlo`] — seeded coverage / consistency experiments.
//! * [`cli`] — the `otinfer` binary's command implementations.
//!
//! Everything internal works on the unit-regularized problem: costs are
//! divided by `ε` once when a [`measures::CostContext`] is built, and the
//! few quantities that change under that reduction (the entropic cost and
//! the cost-type variances) are scaled back by `ε` / `ε²` where they are
//! reported.

pub mod cli;
pub mod inference;
pub mod measures;
pub mod montecarlo;
pub mod operators;
pub mod oracle;
pub mod sinkhorn;
pub mod stats;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum OtError {
    #[error("empty sample")]
    EmptySample,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unbounded cost: non-finite value at ({row}, {col})")]
    UnboundedCost { row: usize, col: usize },
    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },
    #[error("non-optimal potentials: marginal residual {0:.3e}")]
    NonOptimal(f64),
    #[error("rhs not centered: weighted mean {0:.3e}")]
    NotCentered(f64),
    #[error("cost table cannot be evaluated off its support")]
    CostNotExtendable,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, OtError>;
