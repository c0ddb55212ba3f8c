//! Late-fusion multi-task estimation for semiparametric models.
//!
//! Each task fits a cross-fitted estimating-equation estimator locally and
//! ships only a quadratic surrogate `(G, W)` (and optionally kernel
//! statistics on a shared grid) to a central server, which solves a
//! group-penalized fusion problem.

pub mod data;
pub mod error;
pub mod federation;
pub mod fusion;
pub mod kernel;
pub mod moments;
pub mod nuisance_fusion;
pub mod sim;

pub use data::{FoldPlan, ModelKind, ParamEstimate, SimilarityConfig, TaskDataset};
pub use error::{Error, Result};
