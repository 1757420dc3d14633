//! Subgroup performance auditing for model predictions.
//!
//! Given observed outcomes, predictions and a set of covariates, the crate
//! searches for subgroups in which the model's loss differs significantly,
//! attributes each disparity to a shift in bias, variance or both, and
//! arranges the findings as a recursive audit tree.
//!
//! Two test engines are available: a max-T permutation test on mean losses
//! ([`perm`]) and an analytical CUSUM fluctuation test on residuals
//! ([`fluct`]). [`partition`] grows trees from either.

pub mod data;
pub mod fluct;
pub mod io;
pub mod partition;
pub mod perm;
pub mod report;
pub mod seed;
pub mod simgen;
pub mod split;

pub use data::{AuditDataset, CovariateColumn, DataError, GroupStats, IssueClass, LossKind, Scale};
pub use split::{SplitRule, TestError};
