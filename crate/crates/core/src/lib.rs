//! Desk-scale engine for multi-modal-prototype open-world semantic segmentation.
//!
//! The pipeline: split support masks into regions ([`partition`]), pool region
//! features into visual prototypes and ingest textual embeddings
//! ([`prototype`]), fuse the two modalities with background-balanced attention
//! ([`fusion`]), predict per-pixel class probabilities by prototype competition
//! with multi-level residual fusion ([`prediction`]), train the small learnable
//! parameter set ([`training`]) and evaluate under zero/few-shot and
//! generalized few-shot protocols ([`evaluation`]). Frozen encoders are
//! replaced by file-based feature and embedding inputs ([`io`], [`synthetic`]).

pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod io;
pub mod numerics;
pub mod partition;
pub mod pipeline;
pub mod prediction;
pub mod prototype;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};

/// Integer identifier for a semantic class.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
