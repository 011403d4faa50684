//! Image-to-text translation pipeline for target sentiment classification.
//!
//! An image is translated into a token sequence by a non-autoregressive
//! caption transformer (conv backbone + attention encoder/decoder + vocab
//! head), fused with the tweet text through an auxiliary sentence, and
//! classified by a small sentence-pair language encoder. Training runs in
//! two phases — captioner first, classifier second — over a shared
//! vocabulary, with everything built on a minimal reverse-mode autodiff
//! engine that is verifiable by finite differences.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod attention;
pub mod captioner;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
