//! Query documents and their JSONL transport.
//!
//! One object per line:
//! `{"query_id": 7, "entities": ["New York", ...], "summary_text": "..."}` or
//! `{"query_id": 7, "entities": [...], "summary_embedding_id": 7}`.
//! At most one summary field may be present; neither is allowed for
//! entity-only retrieval.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::TextEmbeddings;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("line {line}: {source}")]
    Malformed { line: usize, source: serde_json::Error },
    #[error("query {0}: both summary_text and summary_embedding_id are set")]
    ConflictingSummary(u64),
    #[error("query {query_id}: summary embedding {embedding_id} not found")]
    UnknownSummaryId { query_id: u64, embedding_id: u64 },
    #[error("query {0}: summary_embedding_id given but no summary embeddings were loaded")]
    NoSummaryEmbeddings(u64),
    #[error("duplicate query id {0}")]
    DuplicateQueryId(u64),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLine {
    pub query_id: u64,
    #[serde(default)]
    pub entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_embedding_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Summary {
    /// Raw text, encoded at query time.
    Text(String),
    /// A precomputed embedding.
    Vector(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryDocument {
    pub query_id: u64,
    /// Raw entity strings as extracted; normalized at lookup.
    pub entities: Vec<String>,
    pub summary: Option<Summary>,
}

impl QueryDocument {
    pub fn new(query_id: u64, entities: Vec<String>, summary: Option<Summary>) -> Self {
        Self {
            query_id,
            entities,
            summary,
        }
    }
}

pub fn read_query_lines<R: BufRead>(source: R) -> Result<Vec<QueryLine>, QueryError> {
    let mut out = Vec::new();
    for (n, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryLine =
            serde_json::from_str(&line).map_err(|source| QueryError::Malformed { line: n + 1, source })?;
        if q.summary_text.is_some() && q.summary_embedding_id.is_some() {
            return Err(QueryError::ConflictingSummary(q.query_id));
        }
        out.push(q);
    }
    Ok(out)
}

pub fn write_query_lines<W: Write>(lines: &[QueryLine], mut sink: W) -> io::Result<()> {
    for q in lines {
        let s = serde_json::to_string(q).expect("query line serializes");
        writeln!(sink, "{s}")?;
    }
    sink.flush()
}

/// Turns parsed lines into query documents, attaching precomputed summary
/// vectors by id. Query ids must be unique.
pub fn resolve_queries(
    lines: Vec<QueryLine>,
    summaries: Option<&TextEmbeddings>,
) -> Result<Vec<QueryDocument>, QueryError> {
    let mut seen = BTreeSet::new();
    lines
        .into_iter()
        .map(|q| {
            if !seen.insert(q.query_id) {
                return Err(QueryError::DuplicateQueryId(q.query_id));
            }
            let summary = match (q.summary_text, q.summary_embedding_id) {
                (Some(_), Some(_)) => return Err(QueryError::ConflictingSummary(q.query_id)),
                (Some(text), None) => Some(Summary::Text(text)),
                (None, Some(embedding_id)) => {
                    let store = summaries.ok_or(QueryError::NoSummaryEmbeddings(q.query_id))?;
                    let (_, v) = store.get(embedding_id).ok_or(QueryError::UnknownSummaryId {
                        query_id: q.query_id,
                        embedding_id,
                    })?;
                    Some(Summary::Vector(v.to_vec()))
                }
                (None, None) => None,
            };
            Ok(QueryDocument::new(q.query_id, q.entities, summary))
        })
        .collect()
}
