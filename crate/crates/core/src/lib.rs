//! Knowledge-graph-enriched visual storytelling.
//!
//! Terms are distilled from per-image object features, term paths are
//! enriched with knowledge-graph links chosen by language-model perplexity,
//! and stories are generated by a length-aware Transformer decoded with
//! repetition-penalized beam search.

pub mod decode;
pub mod enrich;
pub mod error;
pub mod io;
pub mod kg;
pub mod lm;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod synth;
pub mod terms;

pub use error::{Error, ErrorKind, Result};
