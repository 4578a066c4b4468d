//! The `reinrec` guide, compiled as doc-tests.
//!
//! Each chapter under `book/src` is attached to a module below, so
//! `cargo test -p reinrec-book` runs every snippet in the book.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/user-state.md")]
pub mod user_state {}

#[doc = include_str!("../../../book/src/off-policy-correction.md")]
pub mod off_policy_correction {}

#[doc = include_str!("../../../book/src/topk-correction.md")]
pub mod topk_correction {}

#[doc = include_str!("../../../book/src/behavior-model.md")]
pub mod behavior_model {}

#[doc = include_str!("../../../book/src/simulator.md")]
pub mod simulator {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}
