//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use common::{brute_force_top_k, random_store, random_vector, reference_metrics};
use entrank::bench::benchmark;
use entrank::eval::RunFile;
use entrank::pipeline::{er_candidates, CandidateStats};
use entrank::query::resolve_queries;
use entrank::{
    generate_synth_corpus, load_qrels, mrr_at_k, recall_at_k, top_k_scan, EmbeddingRecord, EmbeddingStore, EntityIndex,
    EntityKey, Mode, PipelineConfig, Qrels, QueryDocument, RankedList, Retriever, ScoredId, SynthCorpus,
    SynthCorpusSpec,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Noise applied to planted summaries for the R@1000 check.
const PLANTED_NOISE: f64 = 0.05;
const R1000_FLOOR: f64 = 0.99;
const METRIC_TOL: f64 = 1e-9;
const MAX_LATENCY_RATIO: f64 = 0.5;
const MAX_MEAN_POOL: f64 = 100_000.0;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Pool sizes from every batch run in the suite, checked by criterion 6.
#[derive(Default)]
struct PoolLog {
    stats: Vec<(CandidateStats, usize)>,
}

impl PoolLog {
    fn record(&mut self, s: CandidateStats, k_query: usize) {
        self.stats.push((s, k_query));
    }
}

fn pairs(l: &RankedList) -> Vec<(u64, f64)> {
    l.entries().iter().map(|e| (e.id, e.score)).collect()
}

fn c1_top_k_oracle() -> Outcome {
    let (store, _) = random_store(101, 100_000, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    for q in 0..100 {
        let query = random_vector(&mut rng, 64);
        let got = pool.install(|| top_k_scan(&query, &store, 1000, None)).unwrap();
        let want = brute_force_top_k(&query, &store, 1000, None);
        check(
            pairs(&got.ranking) == want,
            format!("query {q}: ranking differs from oracle"),
        )?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("took {secs:.1}s (limit 60s)"))?;
    Ok(format!("100 queries x 100000 vectors, k=1000, exact match, {secs:.1}s"))
}

fn run_from(rows: &[(u64, &[u64])]) -> RunFile {
    let mut run = RunFile::new("fixture");
    for (q, docs) in rows {
        let list = RankedList::from_ordered(
            docs.iter()
                .enumerate()
                .map(|(i, &d)| ScoredId::new(d, 1.0 / (i + 1) as f64))
                .collect(),
        );
        run.insert_ranking(*q, &list).unwrap();
    }
    run
}

fn c2_metrics() -> Outcome {
    // Query 1: first relevant at rank 4 → RR 0.25. Query 2: 2 of 3 relevant
    // retrieved (ranks 1 and 3) → recall 2/3, RR 1. Query 3: judged, no
    // output → 0 and 0.
    let run = run_from(&[(1, &[90, 91, 92, 5, 93]), (2, &[20, 99, 21])]);
    let qrels = load_qrels("1 0 5 1\n2 0 20 1\n2 0 21 1\n2 0 22 2\n3 0 30 1\n3 0 31 0\n".as_bytes()).unwrap();
    let mrr = mrr_at_k(&run, &qrels, 10).unwrap();
    let rec = recall_at_k(&run, &qrels, 1000).unwrap();
    check(
        (mrr - (0.25 + 1.0 + 0.0) / 3.0).abs() < METRIC_TOL,
        format!("MRR@10 {mrr}"),
    )?;
    check(
        (rec - (1.0 + 2.0 / 3.0 + 0.0) / 3.0).abs() < METRIC_TOL,
        format!("R@1000 {rec}"),
    )?;

    let single = load_qrels("1 0 5 1\n".as_bytes()).unwrap();
    check(mrr_at_k(&run, &single, 10).unwrap() == 0.25, "rank-4 case")?;
    let partial = load_qrels("2 0 20 1\n2 0 21 1\n2 0 22 1\n".as_bytes()).unwrap();
    check(
        (recall_at_k(&run, &partial, 1000).unwrap() - 2.0 / 3.0).abs() < METRIC_TOL,
        "2/3 case",
    )?;

    // Randomized 50-query fixture against the reference scorer.
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut qrels_ref: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    let mut qrels = Qrels::new();
    let mut triples = Vec::new();
    let mut run = RunFile::new("rand");
    for q in 0..50u64 {
        let mut docs: Vec<u64> = (0..2000).collect();
        docs.shuffle(&mut rng);
        for &d in &docs[..rng.random_range(1..8)] {
            qrels.insert(q, d);
            qrels_ref.entry(q).or_default().push(d);
        }
        docs.shuffle(&mut rng);
        let depth = rng.random_range(0..1500);
        for (i, &d) in docs[..depth].iter().enumerate() {
            triples.push((q, d, i + 1));
        }
        let list = RankedList::from_ordered(
            docs[..depth]
                .iter()
                .enumerate()
                .map(|(i, &d)| ScoredId::new(d, -(i as f64)))
                .collect(),
        );
        run.insert_ranking(q, &list).unwrap();
    }
    let (r_ref, _) = reference_metrics(&triples, &qrels_ref, 1000);
    let (_, m_ref) = reference_metrics(&triples, &qrels_ref, 10);
    let r = recall_at_k(&run, &qrels, 1000).unwrap();
    let m = mrr_at_k(&run, &qrels, 10).unwrap();
    check((r - r_ref).abs() < METRIC_TOL, format!("random R@1000 {r} vs {r_ref}"))?;
    check((m - m_ref).abs() < METRIC_TOL, format!("random MRR@10 {m} vs {m_ref}"))?;
    Ok(format!(
        "hand fixtures exact; random fixture R@1000={r:.6} MRR@10={m:.6} match reference"
    ))
}

fn small_corpus() -> SynthCorpus {
    generate_synth_corpus(&SynthCorpusSpec {
        image_count: 5_000,
        query_count: 50,
        entities_per_query: 4,
        vocab_size: 40,
        dimension: 32,
        seed: 104,
        noise_scale: PLANTED_NOISE,
    })
    .unwrap()
}

fn docs(corpus: &SynthCorpus) -> Vec<QueryDocument> {
    resolve_queries(corpus.queries.clone(), Some(&corpus.summaries)).unwrap()
}

fn c3_candidate_restriction(pools: &mut PoolLog) -> Outcome {
    let corpus = small_corpus();
    let store = &corpus.images;
    let (index, _) = EntityIndex::build(corpus.entities.entity_inputs().unwrap(), store, 500).unwrap();
    let r = Retriever::new(store, &index).unwrap();
    let cfg = PipelineConfig {
        mode: Mode::TwoStage,
        k_query: 200,
        depth: 1000,
        fallback_to_sr_full: false,
    };
    let out = r.batch_run(&docs(&corpus), &cfg, "c3").unwrap();
    let mut strict = 0;
    for (doc, res) in docs(&corpus).iter().zip(&out.results) {
        let cands = er_candidates(doc, &index, cfg.k_query).unwrap();
        pools.record(cands.stats, cfg.k_query);
        let set: HashSet<u64> = cands.ids.iter().copied().collect();
        let Some(entrank::Summary::Vector(summary)) = &doc.summary else {
            unreachable!()
        };
        let want = brute_force_top_k(summary, store, cfg.depth, Some(&set));
        check(
            pairs(&res.ranking) == want,
            format!("query {}: differs from filtered scan", doc.query_id),
        )?;
        if set.len() < store.len() {
            strict += 1;
        }
    }
    Ok(format!(
        "50 queries on 5000 images match filtered exhaustive scan ({strict} with strict sub-pools)"
    ))
}

fn planted_corpus(noise: f64) -> SynthCorpus {
    generate_synth_corpus(&SynthCorpusSpec {
        image_count: 50_000,
        query_count: 200,
        entities_per_query: 4,
        vocab_size: 100,
        dimension: 64,
        seed: 105,
        noise_scale: noise,
    })
    .unwrap()
}

fn eval_batch(
    corpus: &SynthCorpus,
    index: &EntityIndex,
    k_query: usize,
    depth: usize,
    pools: &mut PoolLog,
) -> (f64, f64) {
    let r = Retriever::new(&corpus.images, index).unwrap();
    let cfg = PipelineConfig {
        mode: Mode::TwoStage,
        k_query,
        depth,
        fallback_to_sr_full: false,
    };
    let out = r.batch_run(&docs(corpus), &cfg, "planted").unwrap();
    for res in &out.results {
        pools.record(res.candidates.unwrap(), k_query);
    }
    (
        mrr_at_k(&out.run, &corpus.qrels, 10).unwrap(),
        recall_at_k(&out.run, &corpus.qrels, 1000).unwrap(),
    )
}

fn c4_planted(pools: &mut PoolLog) -> Outcome {
    let exact = planted_corpus(0.0);
    let n = exact.images.len();
    let (index, _) = EntityIndex::build(exact.entities.entity_inputs().unwrap(), &exact.images, n).unwrap();
    let (mrr, _) = eval_batch(&exact, &index, n, 1000, pools);
    check(
        mrr == 1.0,
        format!("noise 0, k_query={n}: MRR@10 = {mrr}, expected exactly 1.0"),
    )?;
    drop(index);

    let noisy = planted_corpus(PLANTED_NOISE);
    let (index, _) = EntityIndex::build(noisy.entities.entity_inputs().unwrap(), &noisy.images, 1000).unwrap();
    let (_, recall) = eval_batch(&noisy, &index, 1000, 1000, pools);
    check(
        recall >= R1000_FLOOR,
        format!("noise {PLANTED_NOISE}, k_query=1000: R@1000 = {recall} < {R1000_FLOOR}"),
    )?;
    Ok(format!(
        "noise 0: MRR@10 = {mrr}; noise {PLANTED_NOISE}: R@1000 = {recall:.4}"
    ))
}

fn c5_topk_trend(pools: &mut PoolLog) -> Outcome {
    let corpus = planted_corpus(PLANTED_NOISE);
    let (index, _) = EntityIndex::build(corpus.entities.entity_inputs().unwrap(), &corpus.images, 10_000).unwrap();
    let ks = [100, 1_000, 10_000];
    let mut coverage = Vec::new();
    let mut previous: Option<Vec<HashSet<u64>>> = None;
    for &k in &ks {
        let mut pools_k = Vec::new();
        let mut hits = 0.0;
        for q in &corpus.queries {
            let doc = QueryDocument::new(q.query_id, q.entities.clone(), None);
            let c = er_candidates(&doc, &index, k).unwrap();
            pools.record(c.stats, k);
            let set: HashSet<u64> = c.ids.into_iter().collect();
            let rel = corpus.qrels.relevant(q.query_id).unwrap();
            hits += rel.iter().filter(|d| set.contains(d)).count() as f64 / rel.len() as f64;
            pools_k.push(set);
        }
        if let Some(prev) = &previous {
            for (i, (a, b)) in prev.iter().zip(&pools_k).enumerate() {
                check(
                    a.is_subset(b),
                    format!("query {}: pool at smaller k not a subset at k={k}", i + 1),
                )?;
            }
        }
        coverage.push(hits / corpus.queries.len() as f64);
        previous = Some(pools_k);
    }
    check(
        coverage.windows(2).all(|w| w[0] <= w[1]),
        format!("coverage decreased: {coverage:?}"),
    )?;
    Ok(format!(
        "relevant coverage k=100: {:.4}, k=1000: {:.4}, k=10000: {:.4} (nested pools)",
        coverage[0], coverage[1], coverage[2]
    ))
}

fn c6_pool_bound(pools: &PoolLog) -> Outcome {
    // Ten entities, each owning a disjoint block of 10,000 images.
    let (blocks, per_block, dim) = (10usize, 10_000usize, 16usize);
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut records = Vec::with_capacity(blocks * per_block);
    for b in 0..blocks {
        for i in 0..per_block {
            let mut v: Vec<f32> = (0..dim).map(|_| rng.random_range(-0.1f32..0.1)).collect();
            v[b] += 1.0;
            records.push(EmbeddingRecord::new((b * per_block + i) as u64, v));
        }
    }
    let store = EmbeddingStore::build(records, dim).unwrap();
    let entities: Vec<(EntityKey, Vec<f32>)> = (0..blocks)
        .map(|b| {
            let mut v = vec![0.0f32; dim];
            v[b] = 1.0;
            (EntityKey::normalize(&format!("landmark {b}")).unwrap(), v)
        })
        .collect();
    let (index, _) = EntityIndex::build(entities, &store, per_block).unwrap();
    let doc = QueryDocument::new(1, (0..blocks).map(|b| format!("Landmark {b}")).collect(), None);
    let c = er_candidates(&doc, &index, per_block).unwrap();
    check(
        c.ids.len() == 100_000,
        format!("disjoint pool size {} != 100000", c.ids.len()),
    )?;
    check(
        c.stats.pre_dedup_size == 100_000 && c.stats.entities_found == 10,
        "disjoint counters",
    )?;

    let mut all = pools.stats.clone();
    all.push((c.stats, per_block));
    for (s, k) in &all {
        check(
            s.pool_size <= s.pre_dedup_size && s.pre_dedup_size <= s.entities_found * k,
            format!("pool bound violated: {s:?} at k_query={k}"),
        )?;
    }
    Ok(format!(
        "disjoint 10 x 10000 pool = 100000; bound holds for {} recorded pools",
        all.len()
    ))
}

fn c7_serialization() -> Outcome {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let cache_path = dir.path().join("images.emb");
    corpus.images.save(std::fs::File::create(&cache_path).unwrap()).unwrap();
    let cache_bytes = std::fs::read(&cache_path).unwrap();
    let reopened = EmbeddingStore::open(&cache_bytes[..]).unwrap();
    check(reopened == corpus.images, "cache round trip differs")?;
    let mut again = Vec::new();
    reopened.save(&mut again).unwrap();
    check(again == cache_bytes, "cache re-serialization differs")?;

    let inputs = corpus.entities.entity_inputs().unwrap();
    let (index, _) = EntityIndex::build(inputs.clone(), &reopened, 300).unwrap();
    let mut idx_bytes = Vec::new();
    index.save(&mut idx_bytes).unwrap();
    let idx_back = EntityIndex::open(&idx_bytes[..]).unwrap();
    check(idx_back == index, "index round trip differs")?;
    let mut idx_again = Vec::new();
    idx_back.save(&mut idx_again).unwrap();
    check(idx_again == idx_bytes, "index re-serialization differs")?;

    let mut shuffled = inputs;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(107));
    let (half_a, half_b) = shuffled.split_at(shuffled.len() / 2);
    let (partial, _) = EntityIndex::build(half_b.to_vec(), &reopened, 300).unwrap();
    let (other, _) = partial.extend(half_a.to_vec(), &reopened).unwrap();
    let mut other_bytes = Vec::new();
    other.save(&mut other_bytes).unwrap();
    check(other_bytes == idx_bytes, "insertion order changed index bytes")?;
    Ok(format!(
        "cache ({} bytes) and index ({} bytes) round-trip bit-exactly; order-independent bytes",
        cache_bytes.len(),
        idx_bytes.len()
    ))
}

fn c8_efficiency(pools: &mut PoolLog) -> Outcome {
    let corpus = generate_synth_corpus(&SynthCorpusSpec {
        image_count: 1_000_000,
        query_count: 50,
        entities_per_query: 5,
        vocab_size: 60,
        dimension: 64,
        seed: 108,
        noise_scale: PLANTED_NOISE,
    })
    .unwrap();
    let k_query = 10_000;
    let (index, _) = EntityIndex::build(corpus.entities.entity_inputs().unwrap(), &corpus.images, k_query).unwrap();
    let r = Retriever::new(&corpus.images, &index).unwrap();
    let queries = docs(&corpus);
    let report = benchmark(&r, &queries, k_query, 1000).unwrap();
    for q in &queries {
        pools.record(er_candidates(q, &index, k_query).unwrap().stats, k_query);
    }
    check(
        report.mean_pool_size <= MAX_MEAN_POOL,
        format!("mean pool {} > {MAX_MEAN_POOL}", report.mean_pool_size),
    )?;
    check(report.pool_bound_violations == 0, "pool bound violated in benchmark")?;
    check(
        report.latency_ratio <= MAX_LATENCY_RATIO,
        format!(
            "two_stage {:.3} ms vs sr_full {:.3} ms: ratio {:.3} > {MAX_LATENCY_RATIO}",
            report.two_stage_mean_ms, report.sr_full_mean_ms, report.latency_ratio
        ),
    )?;
    Ok(format!(
        "1000000 x 64: sr_full {:.2} ms/query, two_stage {:.2} ms/query, ratio {:.3}, mean pool {:.0}",
        report.sr_full_mean_ms, report.two_stage_mean_ms, report.latency_ratio, report.mean_pool_size
    ))
}

fn main() {
    // `cargo test -- <filter>` passes arguments; the suite always runs whole.
    let mut pools = PoolLog::default();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut(&mut PoolLog) -> Outcome| {
        let start = Instant::now();
        let outcome = f(&mut pools);
        let status = if outcome.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &outcome {
            Ok(m) | Err(m) => m.clone(),
        };
        println!("[{status}] {name}: {detail} ({:.1}s)", start.elapsed().as_secs_f64());
        results.push((name, outcome));
    };
    run("C1 top-k oracle equivalence", &mut |_| c1_top_k_oracle());
    run("C2 metric correctness", &mut |_| c2_metrics());
    run("C3 candidate-restriction exactness", &mut c3_candidate_restriction);
    run("C4 planted-target end-to-end", &mut c4_planted);
    run("C5 top-k trend mechanism", &mut c5_topk_trend);
    run("C7 serialization", &mut |_| c7_serialization());
    run("C8 relative efficiency", &mut c8_efficiency);
    run("C6 pool bound", &mut |p| c6_pool_bound(p));

    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
