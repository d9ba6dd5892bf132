//! Condition-aware sentence embeddings for conditional semantic textual
//! similarity (C-STS).
//!
//! The crate works on precomputed encoder outputs stored as CEMB matrices:
//!
//! 1. [`compose`] turns stored rows into per-record pairs, optionally
//!    subtracting the condition's unconditional embedding;
//! 2. [`projection`] trains a small shared-weight head so that the cosine of
//!    the projected pair tracks the human rating;
//! 3. [`metrics`] scores pairs and correlates them with ratings (Spearman);
//! 4. [`isotropy`] reports how evenly the embeddings fill their space.
//!
//! [`synth`] generates a benchmark with planted structure for testing the
//! whole chain without an encoder, and [`pipeline`] runs it end to end.

pub mod compose;
pub mod dataset;
pub mod embstore;
pub mod error;
pub mod inspect;
pub mod isotropy;
pub mod metrics;
pub mod pipeline;
pub mod projection;
pub mod synth;

pub use compose::{Base, ComposedPair, CompositionVariant};
pub use dataset::CstsRecord;
pub use embstore::{EmbeddingStore, Role, RowKey};
pub use error::{Error, Result};
pub use projection::{HeadKind, HeadSpec, ProjectionModel, TrainConfig};

// The guide's code listings are compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/composition.md")]
    mod composition {}
    #[doc = include_str!("../../../book/src/projection.md")]
    mod projection {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/isotropy.md")]
    mod isotropy {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
