//! Small dense linear algebra and reverse-mode autodiff in `f64`.
//!
//! The crate is deliberately minimal: 2-D matrices only, eager evaluation,
//! and a single [`Tape`] per forward pass. Everything is single-threaded and
//! deterministic, which the training code relies on for bitwise-reproducible
//! runs.

mod matrix;
mod params;
mod tape;

pub mod gradcheck;

pub use matrix::Matrix;
pub use params::{ParamId, ParamStore};
pub use tape::{log_softmax_at, log_softmax_rows, sigmoid, softmax_rows, Gradients, Tape, Var};
