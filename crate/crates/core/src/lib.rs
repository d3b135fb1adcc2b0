//! Segment-wise soft context compression for a small decoder-only transformer.
//!
//! Contexts are split into short segments, each segment is compressed by a
//! LoRA-adapted copy of the frozen base model into concept embeddings, and the
//! base model consumes those embeddings in place of token embeddings.

pub mod cecache;
pub mod checkpoint;
pub mod compressor;
pub mod distill;
pub mod error;
pub mod evalgen;
pub mod pipeline;
pub mod segmenter;
pub mod tensor;
pub mod tinylm;

pub use error::{Error, Result};
