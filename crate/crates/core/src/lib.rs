//! Dispersible-point perception head.
//!
//! A single head design that scatters an anchor point into `K` learnable
//! points, bilinearly samples their features, reasons about them with a
//! pre-norm transformer encoder and reads out class logits, boxes, contours
//! or keypoints. Everything numeric runs on a small reverse-mode engine in
//! [`autodiff`], in `f64`, so every gradient can be checked against central
//! finite differences.
//!
//! The crate is `no_std` (it needs `alloc`); file formats, checkpoints and the
//! command line live in the `unihead-cli` companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod frameworks;
pub mod geometry;
pub mod head;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

mod math;
mod rng;

pub use error::{Error, Result};
pub use tensor::Tensor;
