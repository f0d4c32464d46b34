//! Multi-expert state-space survival model.
//!
//! Pathology instance bags and genomic group embeddings each pass through a
//! stack of attention-guided Mamba layers; a synergistic expert aligns the two
//! modalities with a one-to-one transport plan and an MMD penalty and encodes
//! the interleaved tokens with bidirectional scans; an attention-pooled MLP
//! predicts discrete-time hazards.
//!
//! Everything runs on a small reverse-mode autodiff tape over `f64` tensors.

pub mod autodiff;
pub mod bench;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experts;
pub mod fusion;
pub mod model;
pub mod ssm;
pub mod survival;
pub mod train;

pub use error::{Error, Result};
