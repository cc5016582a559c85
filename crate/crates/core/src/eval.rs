//! TREC-style relevance judgments, run files, and the two reported metrics.
//!
//! Qrels lines are `qid 0 docid rel`; run lines are
//! `qid Q0 docid rank score tag` with the score printed to six decimals.
//! Metrics are macro-averaged over judged queries. A judged query with no
//! run output scores 0; run queries without judgments are skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::pipeline::CandidateStats;
use crate::ranking::RankedList;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {0}: malformed qrels line")]
    MalformedLine(usize),
    #[error("line {line}: malformed run line: {reason}")]
    MalformedRunLine { line: usize, reason: String },
    #[error("no judged queries")]
    NoJudgedQueries,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no candidates: every candidate set had zero postings")]
    NoCandidates,
    #[error("duplicate query id {0} in run")]
    DuplicateQueryId(u64),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

/// Binary relevance judgments: query id → relevant image ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels(BTreeMap<u64, BTreeSet<u64>>);

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: u64, doc_id: u64) {
        self.0.entry(query_id).or_default().insert(doc_id);
    }

    pub fn relevant(&self, query_id: u64) -> Option<&BTreeSet<u64>> {
        self.0.get(&query_id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &BTreeSet<u64>)> {
        self.0.iter().map(|(q, d)| (*q, d))
    }

    /// Writes `qid 0 docid 1` lines, ascending by query then doc.
    pub fn write<W: Write>(&self, mut sink: W) -> io::Result<()> {
        for (q, docs) in &self.0 {
            for d in docs {
                writeln!(sink, "{q} 0 {d} 1")?;
            }
        }
        sink.flush()
    }
}

/// Parses qrels; lines with `rel > 0` mark a document relevant. Queries
/// whose judgments are all non-positive are dropped.
pub fn load_qrels<R: BufRead>(source: R) -> Result<Qrels, EvalError> {
    let mut judged: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for (n, line) in source.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [qid, _, doc, rel] = fields[..] else {
            return Err(EvalError::MalformedLine(n + 1));
        };
        let parse = |s: &str| s.parse::<u64>().map_err(|_| EvalError::MalformedLine(n + 1));
        let (qid, doc) = (parse(qid)?, parse(doc)?);
        let rel: i64 = rel.parse().map_err(|_| EvalError::MalformedLine(n + 1))?;
        let docs = judged.entry(qid).or_default();
        if rel > 0 {
            docs.insert(doc);
        }
    }
    let before = judged.len();
    judged.retain(|_, docs| !docs.is_empty());
    if judged.len() < before {
        log::warn!(
            "dropped {} qrels quer(ies) with no relevant documents",
            before - judged.len()
        );
    }
    Ok(Qrels(judged))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunEntry {
    pub doc_id: u64,
    pub rank: usize,
    pub score: f64,
}

/// A system's ranked output for a set of queries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    pub tag: String,
    queries: BTreeMap<u64, Vec<RunEntry>>,
}

impl RunFile {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            queries: BTreeMap::new(),
        }
    }

    /// Adds a query's ranking; ranks are assigned 1..n in list order.
    pub fn insert_ranking(&mut self, query_id: u64, ranking: &RankedList) -> Result<(), EvalError> {
        if self.queries.contains_key(&query_id) {
            return Err(EvalError::DuplicateQueryId(query_id));
        }
        let entries = ranking
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| RunEntry {
                doc_id: e.id,
                rank: i + 1,
                score: e.score,
            })
            .collect();
        self.queries.insert(query_id, entries);
        Ok(())
    }

    pub fn get(&self, query_id: u64) -> Option<&[RunEntry]> {
        self.queries.get(&query_id).map(Vec::as_slice)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.queries.keys().copied()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn num_lines(&self) -> usize {
        self.queries.values().map(Vec::len).sum()
    }

    /// TREC text, queries ascending, ranks ascending.
    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for (q, entries) in &self.queries {
            for e in entries {
                writeln!(out, "{q} Q0 {} {} {:.6} {}", e.doc_id, e.rank, e.score, self.tag)
                    .expect("writing to a String cannot fail");
            }
        }
        out
    }

    pub fn write<W: Write>(&self, mut sink: W) -> io::Result<()> {
        sink.write_all(self.to_trec_string().as_bytes())?;
        sink.flush()
    }

    /// Parses a TREC run. Entries are ordered by their rank field; ranks
    /// must be unique per query and doc ids must not repeat.
    pub fn read<R: BufRead>(source: R) -> Result<Self, EvalError> {
        let mut tag: Option<String> = None;
        let mut queries: BTreeMap<u64, Vec<RunEntry>> = BTreeMap::new();
        for (n, line) in source.lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let bad = |reason: &str| EvalError::MalformedRunLine {
                line: n + 1,
                reason: reason.to_string(),
            };
            let [qid, _, doc, rank, score, run_tag] = fields[..] else {
                return Err(bad("expected 6 fields"));
            };
            let qid: u64 = qid.parse().map_err(|_| bad("query id"))?;
            let doc_id: u64 = doc.parse().map_err(|_| bad("doc id"))?;
            let rank: usize = rank.parse().map_err(|_| bad("rank"))?;
            let score: f64 = score.parse().map_err(|_| bad("score"))?;
            if rank == 0 {
                return Err(bad("rank must start at 1"));
            }
            tag.get_or_insert_with(|| run_tag.to_string());
            queries.entry(qid).or_default().push(RunEntry { doc_id, rank, score });
        }
        for (q, entries) in &mut queries {
            entries.sort_by_key(|e| e.rank);
            if entries.windows(2).any(|w| w[0].rank == w[1].rank) {
                return Err(EvalError::MalformedRunLine {
                    line: 0,
                    reason: format!("repeated rank in query {q}"),
                });
            }
            let docs: BTreeSet<u64> = entries.iter().map(|e| e.doc_id).collect();
            if docs.len() != entries.len() {
                return Err(EvalError::MalformedRunLine {
                    line: 0,
                    reason: format!("repeated doc id in query {q}"),
                });
            }
        }
        Ok(Self {
            tag: tag.unwrap_or_default(),
            queries,
        })
    }
}

/// Doc ids of the entries ranked within `k`, in rank order.
fn top_k_docs(entries: &[RunEntry], k: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
    entries
        .iter()
        .take_while(move |e| e.rank <= k)
        .map(|e| (e.rank, e.doc_id))
}

fn macro_average(
    run: &RunFile,
    qrels: &Qrels,
    k: usize,
    per_query: impl Fn(&[RunEntry], &BTreeSet<u64>) -> f64,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if qrels.is_empty() {
        return Err(EvalError::NoJudgedQueries);
    }
    let unjudged = run.query_ids().filter(|q| qrels.relevant(*q).is_none()).count();
    if unjudged > 0 {
        log::warn!("{unjudged} run quer(ies) have no judgments and were skipped");
    }
    let total: f64 = qrels
        .iter()
        .map(|(q, relevant)| run.get(q).map_or(0.0, |entries| per_query(entries, relevant)))
        .sum();
    Ok(total / qrels.len() as f64)
}

/// Macro-averaged `|relevant ∩ top-k| / |relevant|`.
pub fn recall_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<f64, EvalError> {
    macro_average(run, qrels, k, |entries, relevant| {
        let hits = top_k_docs(entries, k).filter(|(_, d)| relevant.contains(d)).count();
        hits as f64 / relevant.len() as f64
    })
}

/// Macro-averaged reciprocal rank of the first relevant doc within `k`.
pub fn mrr_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<f64, EvalError> {
    macro_average(run, qrels, k, |entries, relevant| {
        top_k_docs(entries, k)
            .find(|(_, d)| relevant.contains(d))
            .map_or(0.0, |(rank, _)| 1.0 / rank as f64)
    })
}

/// Fraction of postings removed by deduplication:
/// `1 - Σ pool_size / Σ pre_dedup_size`.
pub fn overlap_ratio<'a>(stats: impl IntoIterator<Item = &'a CandidateStats>) -> Result<f64, EvalError> {
    let (unique, total) = stats.into_iter().fold((0u64, 0u64), |(u, t), s| {
        (u + s.pool_size as u64, t + s.pre_dedup_size as u64)
    });
    if total == 0 {
        return Err(EvalError::NoCandidates);
    }
    Ok(1.0 - unique as f64 / total as f64)
}
