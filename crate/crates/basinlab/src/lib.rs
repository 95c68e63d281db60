//! basinlab: build neural-network ensembles that live in a single loss basin
//! and measure what that costs.
//!
//! The crate trains small MLP / residual-MLP classifiers end to end, builds
//! deep, stochastic-weight (SWE), constrained, distilled, and permuted
//! ensembles under matched epoch budgets, aligns independently trained
//! members by permutation symmetry (linear assignment + coordinate descent),
//! and quantifies linear mode connectivity (pairwise and joint), predictive
//! diversity, and 2D loss-plane geometry.
//!
//! Start with the runnable programs in `examples/`; the `basinlab` binary
//! drives the same library from JSON experiment manifests.

pub mod align;
pub mod autodiff;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod landscape;
pub mod manifest;
pub mod models;
pub mod report;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
