//! Few-shot instruction inversion for instruction-conditioned diffusion editing.
//!
//! Before/after exemplar pairs are inverted into a time-segmented bank of
//! cross-attention key/value overrides ([`bank::InstructionBank`]), which the
//! [`editor`] then applies to new images under dual classifier-free guidance.
//! [`metrics`] and [`benchmark`] evaluate edits against paired datasets.

pub mod backend;
pub mod bank;
pub mod cli;
pub mod benchmark;
pub mod editor;
pub mod error;
pub mod image;
pub mod initializer;
pub mod metrics;
pub mod optimizer;

pub use error::{Error, Result};
