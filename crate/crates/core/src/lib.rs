//! Core algorithms for audio-driven, intention-oriented instrument segmentation.
//!
//! An audio command is turned into a log-mel spectrogram, embedded, and
//! classified into a target instrument class. Learnable per-class queries are
//! fused with textual descriptions of every class, correlated with image
//! features, and the resulting per-class feature maps are split into the
//! required class and the irrelevant ones. A distinguishing cross-attention
//! with an inverse residual sharpens the required features, which then drive a
//! small two-way-attention mask decoder as foreground/background prompts.
//!
//! The crate is `no_std` (with `alloc`); everything touching files lives in the
//! companion `asiseg` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod audio;
pub mod decoder;
mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod knowledge;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Matrix;
