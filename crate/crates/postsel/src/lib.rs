//! Selective inference after randomized group-lasso selection in
//! M-estimation models.
//!
//! The workflow: add a gaussian randomization term to a group-lasso
//! objective, record which groups come out active together with their
//! directions and the inactive subgradients, refit the model on the selected
//! support, and then do inference conditional on the selection event. The
//! conditioning leaves a tractable low-dimensional problem whose profiled
//! solution yields a selective MLE, an observed Fisher information, and Wald
//! intervals that stay valid after selection.
//!
//! Modules:
//! - [`model`]: datasets, group structure, loss families, moment matrices.
//! - [`solver`]: the randomized group-lasso solver and selection extraction.
//! - [`fit`]: restricted refit on the support and covariance blocks.
//! - [`selective`]: conditional parameters, Jacobian, barrier, profiled
//!   optimization, MLE, information, Wald inference.
//! - [`baselines`]: data splitting and the naive refit.
//! - [`pipeline`]: end-to-end selective analysis.
//! - [`sim`]: simulation studies comparing the three methods.
//! - [`report`]: shared report types.

pub mod baselines;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod selective;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
