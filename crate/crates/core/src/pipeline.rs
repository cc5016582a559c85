//! Query-time retrieval.
//!
//! Two-stage mode looks up each query entity in the entity index, unions
//! the top-`k_query` postings into a candidate pool, and re-ranks the pool
//! by the dot product of the summary embedding with each candidate's cached
//! image embedding. Entity scores only gate candidacy; they never enter the
//! final score.
//!
//! Two ablation modes are provided: `er_only` (max-fused entity postings,
//! no summary) and `sr_full` (summary scan over the whole store).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::encoder::{EncoderError, TextEncoder};
use crate::entity::{EntityIndex, EntityKey, IndexError};
use crate::eval::{EvalError, RunFile};
use crate::query::{QueryDocument, Summary};
use crate::ranking::{fuse_max, top_k_scan, RankError, RankedList, Scan};
use crate::store::EmbeddingStore;

pub const DEFAULT_K_QUERY: usize = 10_000;
pub const DEFAULT_DEPTH: usize = 1_000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("query {0} has no summary; required for this mode")]
    MissingSummary(u64),
    #[error("query {0} has a text summary but no text encoder is configured")]
    MissingEncoder(u64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k_query {k_query} exceeds the index k_build {k_build}")]
    KQueryExceedsKBuild { k_query: usize, k_build: usize },
    #[error("{0} must be at least 1")]
    ZeroParameter(&'static str),
    #[error("duplicate query id {0}")]
    DuplicateQueryId(u64),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<RankError> for PipelineError {
    fn from(e: RankError) -> Self {
        match e {
            RankError::DimensionMismatch { expected, got } => Self::DimensionMismatch { expected, got },
            RankError::ZeroK => Self::ZeroParameter("depth"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TwoStage,
    ErOnly,
    SrFull,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TwoStage => "two_stage",
            Mode::ErOnly => "er_only",
            Mode::SrFull => "sr_full",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two_stage" => Ok(Mode::TwoStage),
            "er_only" => Ok(Mode::ErOnly),
            "sr_full" => Ok(Mode::SrFull),
            other => Err(format!(
                "unknown mode {other:?} (expected two_stage, er_only or sr_full)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Postings taken per entity.
    pub k_query: usize,
    /// Length of the returned ranking.
    pub depth: usize,
    /// In two-stage mode, scan the whole store when no entity is known.
    pub fallback_to_sr_full: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::TwoStage,
            k_query: DEFAULT_K_QUERY,
            depth: DEFAULT_DEPTH,
            fallback_to_sr_full: false,
        }
    }
}

/// Counters describing one query's candidate pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CandidateStats {
    /// Distinct entities found in the index.
    pub entities_found: usize,
    /// Distinct entities not in the index (or empty after normalization).
    pub entities_disregarded: usize,
    /// Σ truncated postings lengths before the union.
    pub pre_dedup_size: usize,
    /// Size of the deduplicated pool.
    pub pool_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidateSet {
    /// Ascending, unique.
    pub ids: Vec<u64>,
    pub stats: CandidateStats,
}

/// Distinct normalized entity keys; strings that normalize to nothing are
/// returned as a count.
fn distinct_keys(raw: &[String]) -> (BTreeSet<EntityKey>, usize) {
    let mut keys = BTreeSet::new();
    let mut empty = 0;
    for r in raw {
        match EntityKey::normalize(r) {
            Ok(k) => {
                keys.insert(k);
            }
            Err(_) => empty += 1,
        }
    }
    (keys, empty)
}

fn check_k_query(index: &EntityIndex, k_query: usize) -> Result<(), PipelineError> {
    if k_query == 0 {
        return Err(PipelineError::ZeroParameter("k_query"));
    }
    if k_query > index.k_build() {
        return Err(PipelineError::KQueryExceedsKBuild {
            k_query,
            k_build: index.k_build(),
        });
    }
    Ok(())
}

/// Filter & union: the deduplicated union of each known entity's top
/// `k_query` postings. Unknown entities are counted and otherwise ignored.
pub fn er_candidates(
    query: &QueryDocument,
    index: &EntityIndex,
    k_query: usize,
) -> Result<CandidateSet, PipelineError> {
    check_k_query(index, k_query)?;
    let (keys, empty) = distinct_keys(&query.entities);
    let mut stats = CandidateStats {
        entities_disregarded: empty,
        ..Default::default()
    };
    let mut ids = Vec::new();
    for key in &keys {
        match index.lookup(key) {
            Some(postings) => {
                stats.entities_found += 1;
                ids.extend(postings.entries().iter().take(k_query).map(|e| e.id));
            }
            None => stats.entities_disregarded += 1,
        }
    }
    stats.pre_dedup_size = ids.len();
    ids.sort_unstable();
    ids.dedup();
    stats.pool_size = ids.len();
    Ok(CandidateSet { ids, stats })
}

/// Re-ranks the candidate pool by summary dot product, keeping `depth`.
pub fn sr_rerank(
    summary: &[f32],
    candidates: &CandidateSet,
    store: &EmbeddingStore,
    depth: usize,
) -> Result<Scan, PipelineError> {
    Ok(top_k_scan(summary, store, depth, Some(&candidates.ids))?)
}

/// Entity-only ranking: per-id max over the truncated postings.
pub fn er_only_ranking(
    query: &QueryDocument,
    index: &EntityIndex,
    k_query: usize,
    depth: usize,
) -> Result<(RankedList, CandidateSet), PipelineError> {
    let candidates = er_candidates(query, index, k_query)?;
    let (keys, _) = distinct_keys(&query.entities);
    let truncated: Vec<RankedList> = keys
        .iter()
        .filter_map(|k| index.lookup(k))
        .map(|p| p.top(k_query))
        .collect();
    let mut ranking = fuse_max(&truncated);
    ranking.truncate(depth);
    Ok((ranking, candidates))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub query_id: u64,
    pub ranking: RankedList,
    /// Absent in `sr_full` mode.
    pub candidates: Option<CandidateStats>,
    /// Candidate ids missing from the store.
    pub unknown_candidates: usize,
    /// True when a two-stage query fell back to a full scan.
    pub fell_back: bool,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub run: RunFile,
    /// Ordered by query id.
    pub results: Vec<QueryResult>,
}

/// Shared read-only retrieval context.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    store: &'a EmbeddingStore,
    index: &'a EntityIndex,
    encoder: Option<&'a dyn TextEncoder>,
}

impl<'a> Retriever<'a> {
    /// Fails when the index was built against a different store.
    pub fn new(store: &'a EmbeddingStore, index: &'a EntityIndex) -> Result<Self, PipelineError> {
        index.check_store(store)?;
        Ok(Self {
            store,
            index,
            encoder: None,
        })
    }

    /// Encoder used for queries that carry summary text.
    pub fn with_encoder(mut self, encoder: &'a dyn TextEncoder) -> Self {
        self.encoder = Some(encoder);
        self
    }

    pub fn store(&self) -> &'a EmbeddingStore {
        self.store
    }

    pub fn index(&self) -> &'a EntityIndex {
        self.index
    }

    fn summary_vector<'q>(&self, query: &'q QueryDocument) -> Result<std::borrow::Cow<'q, [f32]>, PipelineError> {
        let v = match &query.summary {
            None => return Err(PipelineError::MissingSummary(query.query_id)),
            Some(Summary::Vector(v)) => std::borrow::Cow::Borrowed(v.as_slice()),
            Some(Summary::Text(t)) => {
                let enc = self.encoder.ok_or(PipelineError::MissingEncoder(query.query_id))?;
                std::borrow::Cow::Owned(enc.encode(t)?)
            }
        };
        if v.len() != self.store.dimension() {
            return Err(PipelineError::DimensionMismatch {
                expected: self.store.dimension(),
                got: v.len(),
            });
        }
        Ok(v)
    }

    pub fn run_query(&self, query: &QueryDocument, config: &PipelineConfig) -> Result<QueryResult, PipelineError> {
        if config.depth == 0 {
            return Err(PipelineError::ZeroParameter("depth"));
        }
        let qid = query.query_id;
        match config.mode {
            Mode::SrFull => {
                let summary = self.summary_vector(query)?;
                let scan = top_k_scan(&summary, self.store, config.depth, None)?;
                Ok(QueryResult {
                    query_id: qid,
                    ranking: scan.ranking,
                    candidates: None,
                    unknown_candidates: 0,
                    fell_back: false,
                })
            }
            Mode::ErOnly => {
                let (ranking, candidates) = er_only_ranking(query, self.index, config.k_query, config.depth)?;
                let unknown_candidates = candidates.ids.iter().filter(|id| !self.store.contains(**id)).count();
                Ok(QueryResult {
                    query_id: qid,
                    ranking,
                    candidates: Some(candidates.stats),
                    unknown_candidates,
                    fell_back: false,
                })
            }
            Mode::TwoStage => {
                let summary = self.summary_vector(query)?;
                let candidates = er_candidates(query, self.index, config.k_query)?;
                if candidates.ids.is_empty() {
                    log::debug!("query {qid}: empty candidate pool");
                    if config.fallback_to_sr_full {
                        let scan = top_k_scan(&summary, self.store, config.depth, None)?;
                        return Ok(QueryResult {
                            query_id: qid,
                            ranking: scan.ranking,
                            candidates: Some(candidates.stats),
                            unknown_candidates: 0,
                            fell_back: true,
                        });
                    }
                }
                let scan = sr_rerank(&summary, &candidates, self.store, config.depth)?;
                Ok(QueryResult {
                    query_id: qid,
                    ranking: scan.ranking,
                    candidates: Some(candidates.stats),
                    unknown_candidates: scan.unknown_candidates,
                    fell_back: false,
                })
            }
        }
    }

    /// Runs every query (in parallel) and assembles a run file ordered by
    /// query id.
    pub fn batch_run(
        &self,
        queries: &[QueryDocument],
        config: &PipelineConfig,
        run_tag: &str,
    ) -> Result<BatchOutput, PipelineError> {
        let mut seen = BTreeSet::new();
        for q in queries {
            if !seen.insert(q.query_id) {
                return Err(PipelineError::DuplicateQueryId(q.query_id));
            }
        }
        let mut results = queries
            .par_iter()
            .map(|q| self.run_query(q, config))
            .collect::<Result<Vec<_>, _>>()?;
        results.sort_by_key(|r| r.query_id);

        let mut run = RunFile::new(run_tag);
        for r in &results {
            run.insert_ranking(r.query_id, &r.ranking)?;
        }
        Ok(BatchOutput { run, results })
    }
}
