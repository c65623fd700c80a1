//! Diversity-guided sampling from flow-matching models.
//!
//! A batch of particles is integrated jointly; at every Euler step the
//! log-likelihood of a determinantal point process over the particles'
//! one-step target estimates is differentiated and its gradient is added to
//! the learned velocity, pushing the batch toward distinct modes.
//!
//! * [`linalg`]: distances, log-determinants, eigenvalues, assignment and
//!   transport solvers.
//! * [`net`]: the time-conditioned MLP velocity field with reverse-mode
//!   products and checkpoints.
//! * [`train`]: flow-matching training under four path/coupling formulations.
//! * [`dpp`]: kernel construction, quality weighting, likelihood and gradients.
//! * [`guidance`]: the guided Euler samplers (plain flow, particle guidance,
//!   true-score SDE/ODE family, inpainting, progressively growing kernel).
//! * [`bench`]: Gaussian-mixture densities, scores and mode-discovery trials.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dpp;
pub mod error;
pub mod guidance;
pub mod linalg;
pub mod net;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
