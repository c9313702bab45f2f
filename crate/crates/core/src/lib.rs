//! Divisive model-based clustering for cohorts described by several
//! correlated longitudinal variables and right-censored time-to-event
//! records.
//!
//! The engine maximizes the marginalized posterior of an overfitted finite
//! mixture in which each component couples a matrix-normal linear mixed
//! model for the longitudinal block with piecewise-exponential hazard
//! models for the event variables. Clusters are discovered top-down:
//! starting from a single cluster, candidate binary splits are proposed by
//! a cheap heuristic, refined by coordinate ascent, and accepted only when
//! they raise the posterior at the current Dirichlet concentration.
//!
//! Module layout:
//! * [`matnorm`] — dense kernel: matrix-normal densities, symmetric inverse
//!   square roots, Woodbury-structured inversions.
//! * [`lmm`] — MAP fitting of the cluster-specific multivariate linear
//!   mixed model.
//! * [`bpe`] — piecewise-exponential survival likelihood, conjugate Gamma
//!   MAP, and the Kaplan-Meier estimator.
//! * [`posterior`] — the full marginalized log posterior over partitions
//!   and component parameters.
//! * [`divisive`] — the split search, guards, and dendrogram construction.
//! * [`data`] — cohort ingestion and validation, covariate projection,
//!   synthetic cohorts, and clustering metrics.
//! * [`cli`] — the `trajclust` command-line surface (fit / simulate /
//!   eval / km) with reproducible run manifests.
//! * [`oracles`] — slow brute-force references used by the test suites.

pub mod bpe;
pub mod cli;
pub mod data;
pub mod divisive;
mod error;
pub mod lmm;
pub mod matnorm;
pub mod oracles;
pub mod posterior;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
