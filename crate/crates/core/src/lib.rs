//! Desk-scale weakly-supervised localization pipeline built on a from-scratch
//! f64 tensor engine with reverse-mode gradients.
//!
//! The pipeline trains a small four-stage convolutional backbone with a
//! multi-label classification loss plus a general/specific consistency loss,
//! produces class activation maps and image-specific prototype activation
//! maps, turns them into pseudo segmentation labels, and scores those labels
//! by mean IoU on a synthetic multi-label shapes benchmark.
//!
//! Everything is double precision and bitwise deterministic for a fixed seed:
//! fixed summation orders, a portable counter-based RNG, and ordered
//! reductions across parallel workers.

pub mod backbone;
pub mod cam;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod proto;
pub mod rng;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
