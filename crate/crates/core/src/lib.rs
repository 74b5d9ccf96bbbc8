//! Multi-bit text watermarking by hierarchical tournament sampling.
//!
//! Each generation step derives a seed from the preceding tokens, maps it to a
//! message position, and reshapes the language model's next-token
//! distribution so the emitted token scores high under the g-value families
//! that encode that position's bits. Decoding recomputes the seeds, averages
//! g-values per position and reads each bit off the sign of the average.

pub mod attacks;
pub mod decoder;
pub mod embedder;
pub mod error;
pub mod gvalue;
pub mod harness;
pub mod keying;
pub mod tournament;
pub mod toylm;
pub mod types;

pub use error::{Error, Result};
