//! Audio-driven talking-head video synthesis built around multi-modal
//! adaptive normalization: per-source affine transforms over instance-
//! normalized feature maps, gated by a learned softmax, conditioned on an
//! identity image, predicted optical flow or keypoint heatmaps, and mel /
//! pitch / energy audio features.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode AD over `f64` arrays
//! - [`nn`]: layers (conv, linear, LSTM, spectral norm)
//! - [`audio`]: WAV ingestion, frame alignment, mel / pitch / energy
//! - [`man`]: the adaptive-normalization blocks and gates
//! - [`predictors`]: keypoint-heatmap and optical-flow predictors + oracles
//! - [`gendisc`]: generator, multi-scale discriminator, inference rollout
//! - [`losses`]: training objectives and the Adam optimizer
//! - [`metrics`]: PSNR / SSIM / CPBD / LMD / blink / ACD evaluation
//! - [`data`]: synthetic dataset, batching, checkpoints, run config
//! - [`train`]: the adversarial training loop

pub mod audio;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gendisc;
pub mod losses;
pub mod man;
pub mod metrics;
pub mod nn;
pub mod predictors;
pub mod train;

pub use autodiff::{Module, Param, Tape, Tensor};
pub use error::{Error, Result};
