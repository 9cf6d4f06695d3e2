//! Knowledge-injected radiology report generation.
//!
//! Weighted concept knowledge from TF-IDF, retrieval-derived triplet prompts,
//! mixture-of-knowledge fusion into a small encoder-decoder, and NLG metrics.

pub mod ablation;
pub mod corpus;
pub mod error;
pub mod kift;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod triplet;
pub mod wck;

pub use error::{Error, ErrorKind, Result};
