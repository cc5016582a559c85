//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

use entrank::{EmbeddingRecord, EmbeddingStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scores every stored vector, fully sorts (score desc, id asc), keeps `k`.
pub fn brute_force_top_k(
    query: &[f32],
    store: &EmbeddingStore,
    k: usize,
    filter: Option<&HashSet<u64>>,
) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = Vec::new();
    for (id, v) in store.iter() {
        if filter.is_some_and(|f| !f.contains(&id)) {
            continue;
        }
        let mut s = 0.0f64;
        for i in 0..v.len() {
            s += v[i] as f64 * query[i] as f64;
        }
        all.push((id, s));
    }
    all.sort_by(|a, b| {
        if a.1 > b.1 {
            std::cmp::Ordering::Less
        } else if a.1 < b.1 {
            std::cmp::Ordering::Greater
        } else {
            a.0.cmp(&b.0)
        }
    });
    all.truncate(k);
    all
}

pub fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn random_store(seed: u64, n: usize, dim: usize) -> (EmbeddingStore, HashMap<u64, Vec<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut oracle = HashMap::new();
    let mut records = Vec::with_capacity(n);
    while records.len() < n {
        let id: u64 = rng.random_range(0..(n as u64) * 20);
        if oracle.contains_key(&id) {
            continue;
        }
        let v = random_vector(&mut rng, dim);
        oracle.insert(id, v.clone());
        records.push(EmbeddingRecord::new(id, v));
    }
    (EmbeddingStore::build(records, dim).unwrap(), oracle)
}

/// Per-query recall@k and reciprocal rank, written directly from the
/// definitions over `(qid, doc, rank)` triples.
pub fn reference_metrics(run: &[(u64, u64, usize)], qrels: &BTreeMap<u64, Vec<u64>>, k: usize) -> (f64, f64) {
    let mut recall_sum = 0.0;
    let mut rr_sum = 0.0;
    for (q, rel) in qrels {
        let mut rows: Vec<&(u64, u64, usize)> = run.iter().filter(|r| r.0 == *q).collect();
        rows.sort_by_key(|r| r.2);
        let mut hits = 0;
        let mut first: Option<usize> = None;
        for r in rows {
            if r.2 > k {
                break;
            }
            if rel.contains(&r.1) {
                hits += 1;
                if first.is_none() {
                    first = Some(r.2);
                }
            }
        }
        recall_sum += hits as f64 / rel.len() as f64;
        rr_sum += first.map(|r| 1.0 / r as f64).unwrap_or(0.0);
    }
    let n = qrels.len() as f64;
    (recall_sum / n, rr_sum / n)
}
