//! Structure-informed positional encoding for symbolic music generation.
//!
//! The crate covers the whole pipeline around a small Transformer decoder:
//! MIDI ingestion onto a 16-steps-per-quarter pianoroll grid, structural
//! label alignment, positional-encoding variants that inject tempo, section,
//! chord and melody-pitch structure into attention, training with a
//! sequence-length curriculum, binarization of generated probabilities, and
//! the SSMD / chroma / groove / note-density metrics.

pub mod cli;
pub mod config;
pub mod error;
pub mod generate;
pub mod labels;
pub mod metrics;
pub mod midi;
pub mod model;
pub mod pianoroll;
pub mod posenc;
pub mod postprocess;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
