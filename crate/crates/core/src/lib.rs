//! Mel-graph embedding recognition of underwater acoustic targets.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`audio_io`]: WAV loading, band-limited resampling, segmentation and
//!   leakage-free time-ordered splits.
//! - [`features`]: log-Mel spectrograms (plus MFCC/STFT variants),
//!   normalization and SpecAugment masking.
//! - [`hinich`]: bispectrum estimation and the Gaussianity / linearity tests.
//! - [`tensor`]: a small reverse-mode autodiff tape with the primitives the
//!   model needs and a finite-difference gradient checker.
//! - [`model`]: the graph-transformer network (patchify stem, attention
//!   encoder, KNN Mel-graph, max-relative graph convolution, FFN, head).
//! - [`training`], [`evaluation`], [`checkpoint`]: Adam training loop,
//!   metrics and significance tests, binary checkpoints.
//! - [`synthgen`]: a deterministic synthetic ship-noise generator.

pub mod audio_io;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod hinich;
pub mod model;
pub mod special;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
