//! Entity-gated two-stage dense retrieval.
//!
//! Images are embedded once into an immutable [`store::EmbeddingStore`].
//! Offline, every known entity is mapped to its top-k images by dot product
//! ([`entity::EntityIndex`]). At query time the postings of the query's
//! entities are unioned into a candidate pool which is re-ranked by the dot
//! product of the query summary embedding with each candidate
//! ([`pipeline::Retriever`]). [`eval`] scores TREC run files with Recall@K
//! and MRR@K, and [`synth`] generates corpora with planted relevance.

pub mod bench;
pub mod encoder;
pub mod entity;
pub mod eval;
pub mod pipeline;
pub mod query;
pub mod ranking;
pub mod store;
pub mod synth;

pub use encoder::{MockEncoder, MockEncoderConfig, TextEmbeddings, TextEncoder};
pub use entity::{normalize_entity, EntityIndex, EntityKey};
pub use eval::{load_qrels, mrr_at_k, overlap_ratio, recall_at_k, Qrels, RunFile};
pub use pipeline::{
    er_candidates, sr_rerank, CandidateSet, CandidateStats, Mode, PipelineConfig, QueryResult, Retriever,
};
pub use query::{QueryDocument, Summary};
pub use ranking::{dot_score, fuse_max, top_k_scan, RankedList, ScoredId};
pub use store::{EmbeddingRecord, EmbeddingStore};
pub use synth::{generate_synth_corpus, SynthCorpus, SynthCorpusSpec};
