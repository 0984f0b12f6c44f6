//! Two-stream visible/thermal pedestrian pixel detector with unsupervised
//! multimodal domain adaptation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense f64 tensors, convolution, activations, SGD, gradient
//!   clipping and a finite-difference gradient checker.
//! - [`detector`]: the two-stream fully-convolutional network with a fused
//!   multispectral head and per-modality supervision heads.
//! - [`labels`]: box masks, pseudo-label state and cross-modal label fusion.
//! - [`losses`]: masked pixel cross-entropy and the multi-detection objectives.
//! - [`adaptation`]: source training and the iterative pseudo-label
//!   adaptation loop.
//! - [`data`]: paired PGM datasets and the synthetic scene generator.
//! - [`eval`]: pixel-level average precision and heatmap output.
//! - [`cli`]: subcommand implementations used by the `umda` binary.

pub mod adaptation;
pub mod cli;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod labels;
pub mod losses;
pub mod tensor;

pub use error::{Error, Result};
