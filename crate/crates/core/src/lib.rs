//! Hierarchical compact memory over caption embeddings.
//!
//! Captions and their embeddings are grouped bottom-up by first-neighbor
//! clustering ([`finch`]); every cluster at every level is replaced by one
//! compact summary ([`compaction`]); the result is a linked, persistent
//! [`membank::MemoryBank`] that [`retrieval`] reads top-down from temporal
//! anchors of a video's frame features.

pub mod compaction;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod finch;
pub mod http;
pub mod membank;
pub mod retrieval;
pub mod vector;

pub use compaction::{ClusterSummary, Summarizer, SummarizerConfig, SummarizerKind};
pub use config::Config;
pub use corpus::{CaptionRecord, Corpus, Embedder, EmbedderConfig, StubEmbedder};
pub use error::{Error, ErrorClass, Result};
pub use finch::{build_hierarchy, FinchConfig, PartitionHierarchy, PartitionLevel};
pub use membank::{
    bank_stats, build_bank, load_bank, save_bank, BankMode, BuildOptions, BuildStats, MemoryBank,
};
pub use retrieval::{
    retrieve, AnchorSet, LevelSpec, ReadMode, RetrievalConfig, RetrievalResult, Selection,
};
pub use vector::EmbeddingMatrix;
