//! Off-policy and top-K corrected REINFORCE for sequential recommendation.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: matrices, stable softmax, seeded random streams.
//! * [`policy`]: the recurrent user-state model, softmax policy, retrieval
//!   and serving.
//! * [`grad`]: importance weights, the corrected surrogate objective and its
//!   gradient, gradient checking, optimizers.
//! * [`behavior`]: the jointly learned behavior-policy head.
//! * [`sim`]: synthetic environments, logged-data synthesis, evaluation.
//! * [`train`]: the training loop.
//! * [`harness`]: configuration, datasets, run artifacts and experiment
//!   recipes used by the `reinrec` command-line tool.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod behavior;
pub mod checkpoint;
mod error;
pub mod grad;
pub mod harness;
pub mod numerics;
pub mod policy;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
