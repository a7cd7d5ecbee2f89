//! Multi-output Gaussian process classifiers for vector-valued functions of
//! continuous inputs.
//!
//! A classifier here is one GP prior per class over the whole vector-valued
//! signal; scoring an instance means evaluating its log marginal likelihood
//! under each class and taking the best. Hyperparameters can be fit per
//! class by maximum marginal likelihood (generative) or jointly by minimum
//! classification error (discriminative), with exact or low-rank
//! (FITC/PITC) likelihoods throughout.
//!
//! The crate is organized bottom-up:
//!
//! - [`model`]: domain types, packed parameter vectors, dataset validation.
//! - [`kernel`]: the convolved / LMC covariance closed forms and builders.
//! - [`likelihood`]: exact and low-rank log marginals with analytic
//!   gradients, plus a finite-difference gradient checker.
//! - [`optimize`]: backtracking-line-search gradient descent.
//! - [`train`]: generative fitting and the MCE objective and fitter.
//! - [`classify`]: prediction and dataset evaluation.
//! - [`data`]: dataset/model file formats, normalization, the synthetic
//!   generator and grid decimation.

pub mod classify;
pub mod data;
pub mod error;
mod gradcheck;
pub mod kernel;
pub mod likelihood;
pub mod model;
pub mod optimize;
pub mod train;

pub use error::{MogpError, Result};

// Instances and hyperparameters expose nalgebra matrices directly; re-export
// the crate so downstream users build against the same version.
pub use nalgebra;

/// Configure the global worker pool from the `MOGP_THREADS` environment
/// variable (0 or unset means automatic). Safe to call more than once; only
/// the first call takes effect.
pub fn init_thread_pool_from_env() {
    if let Ok(v) = std::env::var("MOGP_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                // Ignore the error when a pool already exists.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
