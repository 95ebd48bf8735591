//! Causal character-block downsampling laboratory.
//!
//! Byte-level data handling, a small reverse-mode autodiff substrate, the
//! GBST family of block downsamplers (plus Lee-style convolutional
//! downsampling), leak auditing, and a desk-scale encoder–decoder.

pub mod bytedata;
pub mod downsamplers;
pub mod error;
pub mod leakaudit;
pub mod metrics;
pub mod numcore;
pub mod seq2seq;

pub use error::{Error, Result};
