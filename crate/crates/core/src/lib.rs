//! Core algorithms for dual-branch ECG/IEGM rhythm classification.
//!
//! This crate is `no_std` + `alloc`: everything in here is pure computation
//! over in-memory buffers. File formats, the CLI, and anything touching the
//! filesystem live in the companion `rhythmlab` crate.
//!
//! The pipeline, end to end:
//!
//! 1. [`ingest`]: record/segment domain types, rhythm-label grouping,
//!    stratified splitting.
//! 2. [`dsp`]: windowing, downsampling, normalization, notch/low-pass
//!    filtering, wavelet denoising, augmentation, minority upsampling.
//! 3. [`autodiff`]: a dense-tensor reverse-mode engine with exactly the
//!    operator set the model needs, plus a finite-difference checker.
//! 4. [`model`]: dual 1D-ResNet encoders, gated cross-modal fusion, a
//!    Transformer classification head, and focal loss.
//! 5. [`agcacl`]: the adaptive global class-aware contrastive loss: class
//!    weights, global similarity matrix, modulation coefficients, priors,
//!    momentum smoothing, and the intra/inter objective.
//! 6. [`train`]: Adam, class-balanced sampling, per-epoch coefficient
//!    refresh, and the deterministic training loop.
//! 7. [`eval`]: confusion matrix, macro metrics, compactness stats.
//! 8. [`synth`]: deterministic synthetic signals and embedding clusters
//!    for desk-scale verification.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod agcacl;
pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
