//! Heterogeneity weighted U (HWU) association testing.
//!
//! The statistic sums pairwise phenotype similarities, computed from
//! residualized mid-ranks, weighted by the product of a background
//! (latent-structure) similarity and a genetic similarity. Its null
//! distribution is a weighted sum of chi-square(1) variables whose weights
//! are the eigenvalues of the covariate-projected weight matrix.

pub mod comparators;
pub mod engine;
pub mod error;
pub mod matrix;
pub mod quadform;
pub mod rank_kernel;
pub mod scan;
pub mod simgen;
pub mod weights;

pub use error::{HwuError, Result};
pub use matrix::Matrix;
