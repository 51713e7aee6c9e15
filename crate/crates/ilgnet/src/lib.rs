//! Image aesthetic-quality classifier built around a reduced-depth
//! inception backbone with batch normalization. Feature maps from the
//! early, middle and final stages are pooled and projected into local and
//! global descriptors, concatenated, and classified into high/low aesthetic
//! quality by a two-way softmax.
//!
//! The crate is self-contained: a small dense-tensor engine with hand-rolled
//! forward and backward passes, a finite-difference gradient checker that
//! certifies every backward pass, dataset split protocols over vote
//! histograms, a momentum-SGD trainer with a stepped learning-rate policy,
//! binary checkpoints, and a command-line front end.

pub mod ava;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
