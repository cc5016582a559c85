//! Exact dot-product scoring and deterministic top-k selection.
//!
//! Every ranking in the crate uses one total order: score descending, then
//! id ascending. Scores are accumulated in f64 over f32 components in index
//! order, so a vector's score does not depend on how a scan is partitioned.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::EmbeddingStore;

/// Rows per parallel work unit. Fixed so partitioning never depends on the
/// thread count.
pub const SCAN_CHUNK_ROWS: usize = 8192;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RankError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: u64,
    pub score: f64,
}

impl ScoredId {
    pub fn new(id: u64, score: f64) -> Self {
        Self { id, score }
    }
}

/// The ranking order: higher score first, ties by lower id.
#[inline]
pub fn rank_order(a: &ScoredId, b: &ScoredId) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

/// Ordered `(id, score)` pairs with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedList(Vec<ScoredId>);

impl RankedList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sorts `entries` into ranking order. Ids must already be unique.
    pub fn from_unsorted(mut entries: Vec<ScoredId>) -> Self {
        entries.sort_unstable_by(rank_order);
        debug_assert!(has_unique_ids(&entries));
        Self(entries)
    }

    /// Wraps entries that are already in final order (e.g. read from disk).
    pub fn from_ordered(entries: Vec<ScoredId>) -> Self {
        Self(entries)
    }

    pub fn entries(&self) -> &[ScoredId] {
        &self.0
    }

    pub fn into_entries(self) -> Vec<ScoredId> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.0.iter().map(|e| e.id)
    }

    pub fn truncate(&mut self, k: usize) {
        self.0.truncate(k);
    }

    /// First `k` entries as a new list.
    pub fn top(&self, k: usize) -> RankedList {
        Self(self.0[..k.min(self.0.len())].to_vec())
    }

    /// True when entries are strictly ordered under [`rank_order`] and all
    /// scores are finite.
    pub fn is_canonical(&self) -> bool {
        self.0.iter().all(|e| e.score.is_finite())
            && self.0.windows(2).all(|w| rank_order(&w[0], &w[1]) == Ordering::Less)
    }
}

fn has_unique_ids(entries: &[ScoredId]) -> bool {
    let mut ids: Vec<u64> = entries.iter().map(|e| e.id).collect();
    ids.sort_unstable();
    ids.windows(2).all(|w| w[0] != w[1])
}

/// `Σ a[i]·b[i]` accumulated in f64.
pub fn dot_score(a: &[f32], b: &[f32]) -> Result<f64, RankError> {
    if a.len() != b.len() {
        return Err(RankError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

/// Output of [`top_k_scan`].
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub ranking: RankedList,
    /// Candidate ids that are not in the store (skipped).
    pub unknown_candidates: usize,
}

/// Keeps the `k` best entries of `buf` (unordered).
fn retain_top_k(buf: &mut Vec<ScoredId>, k: usize) {
    if buf.len() > k {
        buf.select_nth_unstable_by(k - 1, rank_order);
        buf.truncate(k);
    }
}

fn scan_rows(query: &[f32], store: &EmbeddingStore, rows: impl Iterator<Item = usize>, k: usize) -> Vec<ScoredId> {
    let ids = store.ids();
    let mut buf: Vec<ScoredId> = rows
        .map(|pos| ScoredId::new(ids[pos], dot_unchecked(query, store.row(pos))))
        .collect();
    retain_top_k(&mut buf, k);
    buf
}

/// Exact top-`k` by dot product against `store`.
///
/// With `candidates`, only those ids are scored; ids missing from the store
/// are skipped and counted, and repeated ids are scored once. The result is
/// the full scan filtered to the candidates, truncated to `k`.
pub fn top_k_scan(
    query: &[f32],
    store: &EmbeddingStore,
    k: usize,
    candidates: Option<&[u64]>,
) -> Result<Scan, RankError> {
    if k == 0 {
        return Err(RankError::ZeroK);
    }
    if query.len() != store.dimension() {
        return Err(RankError::DimensionMismatch {
            expected: store.dimension(),
            got: query.len(),
        });
    }

    let (mut merged, unknown_candidates) = match candidates {
        None => {
            let n = store.len();
            let parts: Vec<Vec<ScoredId>> = (0..n.div_ceil(SCAN_CHUNK_ROWS))
                .into_par_iter()
                .map(|c| {
                    let lo = c * SCAN_CHUNK_ROWS;
                    let hi = (lo + SCAN_CHUNK_ROWS).min(n);
                    scan_rows(query, store, lo..hi, k)
                })
                .collect();
            (parts.concat(), 0)
        }
        Some(cands) => {
            let mut positions: Vec<usize> = Vec::with_capacity(cands.len());
            let mut unknown = 0usize;
            for &id in cands {
                match store.position(id) {
                    Some(p) => positions.push(p),
                    None => unknown += 1,
                }
            }
            if !positions.is_sorted() {
                positions.sort_unstable();
            }
            positions.dedup();
            let parts: Vec<Vec<ScoredId>> = positions
                .par_chunks(SCAN_CHUNK_ROWS)
                .map(|chunk| scan_rows(query, store, chunk.iter().copied(), k))
                .collect();
            (parts.concat(), unknown)
        }
    };

    retain_top_k(&mut merged, k);
    Ok(Scan {
        ranking: RankedList::from_unsorted(merged),
        unknown_candidates,
    })
}

/// Merges rankings keeping each id once, at its maximum score.
pub fn fuse_max<'a>(lists: impl IntoIterator<Item = &'a RankedList>) -> RankedList {
    let mut best: HashMap<u64, f64> = HashMap::new();
    for list in lists {
        for e in list.entries() {
            best.entry(e.id)
                .and_modify(|s| {
                    if e.score > *s {
                        *s = e.score
                    }
                })
                .or_insert(e.score);
        }
    }
    RankedList::from_unsorted(best.into_iter().map(|(id, score)| ScoredId::new(id, score)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::EmbeddingRecord;

    fn tiny_store() -> EmbeddingStore {
        EmbeddingStore::build(
            vec![
                EmbeddingRecord::new(1, vec![1.0, 0.0]),
                EmbeddingRecord::new(2, vec![0.0, 1.0]),
                EmbeddingRecord::new(3, vec![0.5, 0.5]),
            ],
            2,
        )
        .unwrap()
    }

    fn list(pairs: &[(u64, f64)]) -> RankedList {
        RankedList::from_unsorted(pairs.iter().map(|&(i, s)| ScoredId::new(i, s)).collect())
    }

    fn pairs(l: &RankedList) -> Vec<(u64, f64)> {
        l.entries().iter().map(|e| (e.id, e.score)).collect()
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dot_score(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(dot_score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(
            dot_score(&[1.0], &[1.0, 2.0]),
            Err(RankError::DimensionMismatch { expected: 1, got: 2 })
        );
    }

    #[test]
    fn scan_small() {
        let s = tiny_store();
        let scan = top_k_scan(&[1.0, 0.0], &s, 2, None).unwrap();
        assert_eq!(pairs(&scan.ranking), vec![(1, 1.0), (3, 0.5)]);
    }

    #[test]
    fn scan_k_exceeds_count() {
        let s = tiny_store();
        let scan = top_k_scan(&[1.0, 0.0], &s, 10, None).unwrap();
        assert_eq!(pairs(&scan.ranking), vec![(1, 1.0), (3, 0.5), (2, 0.0)]);
        assert!(scan.ranking.is_canonical());
    }

    #[test]
    fn scan_ties_by_id() {
        let s = EmbeddingStore::build(
            (0..5)
                .rev()
                .map(|i| EmbeddingRecord::new(i, vec![1.0]))
                .collect::<Vec<_>>(),
            1,
        )
        .unwrap();
        let scan = top_k_scan(&[2.0], &s, 3, None).unwrap();
        assert_eq!(scan.ranking.ids().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn scan_candidates_skip_unknown_and_duplicates() {
        let s = tiny_store();
        let scan = top_k_scan(&[1.0, 0.0], &s, 5, Some(&[2, 99, 3, 3])).unwrap();
        assert_eq!(pairs(&scan.ranking), vec![(3, 0.5), (2, 0.0)]);
        assert_eq!(scan.unknown_candidates, 1);

        let empty = top_k_scan(&[1.0, 0.0], &s, 5, Some(&[])).unwrap();
        assert!(empty.ranking.is_empty());
    }

    #[test]
    fn scan_errors() {
        let s = tiny_store();
        assert_eq!(
            top_k_scan(&[1.0], &s, 1, None),
            Err(RankError::DimensionMismatch { expected: 2, got: 1 })
        );
        assert_eq!(top_k_scan(&[1.0, 0.0], &s, 0, None), Err(RankError::ZeroK));
    }

    #[test]
    fn fuse_examples() {
        let a = list(&[(1, 0.9), (2, 0.5)]);
        let b = list(&[(2, 0.8)]);
        assert_eq!(pairs(&fuse_max([&a, &b])), vec![(1, 0.9), (2, 0.8)]);
        assert_eq!(fuse_max([&a]), a);
        assert!(fuse_max(std::iter::empty()).is_empty());
    }

    #[test]
    fn canonical_check() {
        assert!(list(&[(2, 1.0), (1, 1.0)]).is_canonical());
        assert!(!RankedList::from_ordered(vec![ScoredId::new(2, 1.0), ScoredId::new(1, 1.0)]).is_canonical());
        assert!(!RankedList::from_ordered(vec![ScoredId::new(1, 0.0), ScoredId::new(2, 1.0)]).is_canonical());
    }
}
