use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use entrank::bench::benchmark;
use entrank::encoder::load_text_embeddings;
use entrank::query::{read_query_lines, resolve_queries};
use entrank::store::read_records;
use entrank::synth::{sidecar_path, IMAGES_FILE, QRELS_FILE, QUERIES_FILE};
use entrank::{
    generate_synth_corpus, load_qrels, mrr_at_k, overlap_ratio, recall_at_k, EmbeddingStore, EntityIndex, EntityKey,
    MockEncoder, MockEncoderConfig, PipelineConfig, QueryDocument, Retriever, RunFile, Summary, SynthCorpusSpec,
    TextEmbeddings, TextEncoder,
};
use serde_json::{json, Map, Value};

use crate::{
    BatchArgs, BenchArgs, BuildCacheArgs, BuildIndexArgs, EntitySource, EvalArgs, ExtendIndexArgs, QueryArgs,
    RetrievalArgs, SweepArgs, SynthArgs,
};

fn reader(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn hex(fp: u64) -> String {
    format!("{fp:016x}")
}

fn open_store(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::open(reader(path)?).with_context(|| format!("reading cache {}", path.display()))
}

fn open_index(path: &Path) -> Result<EntityIndex> {
    EntityIndex::open(reader(path)?).with_context(|| format!("reading index {}", path.display()))
}

fn save_index(index: &EntityIndex, path: &Path) -> Result<u64> {
    let mut w = writer(path)?;
    let n = index.save(&mut w)?;
    w.flush()?;
    Ok(n)
}

fn load_text(binary: &Path, sidecar: Option<&PathBuf>) -> Result<TextEmbeddings> {
    let sidecar = sidecar.cloned().unwrap_or_else(|| sidecar_path(binary));
    load_text_embeddings(reader(binary)?, reader(&sidecar)?)
        .with_context(|| format!("reading {} with sidecar {}", binary.display(), sidecar.display()))
}

fn entity_inputs(source: &EntitySource, dimension: usize) -> Result<Vec<(EntityKey, Vec<f32>)>> {
    if let Some(bin) = &source.entities {
        return Ok(load_text(bin, source.entities_sidecar.as_ref())?.entity_inputs()?);
    }
    let Some(names) = &source.entity_names else {
        bail!("one of --entities or --entity-names is required");
    };
    let encoder = MockEncoder::new(MockEncoderConfig {
        dimension,
        seed: source.seed,
    })?;
    let text = fs::read_to_string(names).with_context(|| format!("reading {}", names.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok((EntityKey::normalize(l)?, encoder.encode(l)?)))
        .collect()
}

pub fn build_cache(a: BuildCacheArgs) -> Result<String> {
    let (dimension, records) =
        read_records(reader(&a.input)?).with_context(|| format!("reading embeddings {}", a.input.display()))?;
    if let Some(want) = a.dim {
        if want != dimension {
            bail!("input dimension {dimension} does not match --dim {want}");
        }
    }
    let store = EmbeddingStore::build(records, dimension)?;
    let mut w = writer(&a.cache)?;
    let bytes = store.save(&mut w)?;
    w.flush()?;
    log::info!("wrote {} vectors to {}", store.len(), a.cache.display());
    Ok(json!({
        "command": "build-cache",
        "count": store.len(),
        "dimension": dimension,
        "fingerprint": hex(store.fingerprint()),
        "bytes": bytes,
    })
    .to_string())
}

pub fn build_index(a: BuildIndexArgs) -> Result<String> {
    let store = open_store(&a.cache)?;
    let inputs = entity_inputs(&a.source, store.dimension())?;
    let (index, report) = EntityIndex::build(inputs, &store, a.k_build)?;
    let bytes = save_index(&index, &a.index)?;
    log::info!("indexed {} entities into {}", index.len(), a.index.display());
    Ok(json!({
        "command": "build-index",
        "entities": index.len(),
        "indexed": report.indexed,
        "duplicate_keys": report.duplicate_keys,
        "k_build": index.k_build(),
        "store_fingerprint": hex(index.store_fingerprint()),
        "bytes": bytes,
    })
    .to_string())
}

pub fn extend_index(a: ExtendIndexArgs) -> Result<String> {
    let store = open_store(&a.cache)?;
    let index = open_index(&a.index)?;
    let inputs = entity_inputs(&a.source, store.dimension())?;
    let (next, report) = index.extend(inputs, &store)?;
    let out = a.index_out.as_ref().unwrap_or(&a.index);
    let bytes = save_index(&next, out)?;
    Ok(json!({
        "command": "extend-index",
        "entities": next.len(),
        "indexed": report.indexed,
        "existing_keys": report.existing_keys,
        "duplicate_keys": report.duplicate_keys,
        "k_build": next.k_build(),
        "bytes": bytes,
    })
    .to_string())
}

struct Loaded {
    store: EmbeddingStore,
    index: EntityIndex,
    summaries: Option<TextEmbeddings>,
    encoder: Option<MockEncoder>,
}

impl Loaded {
    fn open(a: &RetrievalArgs, max_k_query: usize) -> Result<Self> {
        let store = open_store(&a.cache)?;
        let index = open_index(&a.index)?;
        index.check_store(&store)?;
        if max_k_query > index.k_build() {
            bail!("k_query {max_k_query} exceeds the index k_build {}", index.k_build());
        }
        let summaries = a
            .summaries
            .as_ref()
            .map(|p| load_text(p, a.summaries_sidecar.as_ref()))
            .transpose()?;
        let encoder = a
            .seed
            .map(|seed| {
                MockEncoder::new(MockEncoderConfig {
                    dimension: store.dimension(),
                    seed,
                })
            })
            .transpose()?;
        Ok(Self {
            store,
            index,
            summaries,
            encoder,
        })
    }

    fn retriever(&self) -> Result<Retriever<'_>> {
        let r = Retriever::new(&self.store, &self.index)?;
        Ok(match &self.encoder {
            Some(e) => r.with_encoder(e),
            None => r,
        })
    }

    fn queries(&self, path: &Path) -> Result<Vec<QueryDocument>> {
        let lines = read_query_lines(reader(path)?).with_context(|| format!("reading queries {}", path.display()))?;
        Ok(resolve_queries(lines, self.summaries.as_ref())?)
    }
}

pub fn query(a: QueryArgs) -> Result<String> {
    let ctx = Loaded::open(&a.retrieval, a.retrieval.k_query)?;
    let summary = match (a.summary_text, a.summary_id) {
        (Some(t), _) => Some(Summary::Text(t)),
        (None, Some(id)) => {
            let Some(s) = &ctx.summaries else {
                bail!("--summary-id needs --summaries");
            };
            let (_, v) = s
                .get(id)
                .with_context(|| format!("no summary embedding with id {id}"))?;
            Some(Summary::Vector(v.to_vec()))
        }
        (None, None) => None,
    };
    let doc = QueryDocument::new(a.query_id, a.entities, summary);
    let config = PipelineConfig {
        mode: a.mode,
        k_query: a.retrieval.k_query,
        depth: a.retrieval.depth,
        fallback_to_sr_full: a.fallback_sr_full,
    };
    let result = ctx.retriever()?.run_query(&doc, &config)?;
    let mut out = serde_json::to_value(&result)?;
    out["command"] = json!("query");
    out["mode"] = json!(a.mode);
    Ok(out.to_string())
}

pub fn batch(a: BatchArgs) -> Result<String> {
    let ctx = Loaded::open(&a.retrieval, a.retrieval.k_query)?;
    let docs = ctx.queries(&a.queries)?;
    let config = PipelineConfig {
        mode: a.mode,
        k_query: a.retrieval.k_query,
        depth: a.retrieval.depth,
        fallback_to_sr_full: a.fallback_sr_full,
    };
    let tag = a.tag.unwrap_or_else(|| format!("entrank-{}", a.mode));
    let out = ctx.retriever()?.batch_run(&docs, &config, &tag)?;

    let mut w = writer(&a.run_out)?;
    out.run.write(&mut w)?;
    w.flush()?;

    if let Some(path) = &a.stats_out {
        let mut w = writer(path)?;
        for r in &out.results {
            let line = json!({
                "query_id": r.query_id,
                "candidates": r.candidates,
                "unknown_candidates": r.unknown_candidates,
                "fell_back": r.fell_back,
            });
            writeln!(w, "{line}")?;
        }
        w.flush()?;
    }

    let stats: Vec<_> = out.results.iter().filter_map(|r| r.candidates).collect();
    let mean_pool =
        (!stats.is_empty()).then(|| stats.iter().map(|s| s.pool_size as f64).sum::<f64>() / stats.len() as f64);
    Ok(json!({
        "command": "batch",
        "mode": a.mode,
        "queries": out.results.len(),
        "run_lines": out.run.num_lines(),
        "k_query": config.k_query,
        "depth": config.depth,
        "mean_pool_size": mean_pool,
        "overlap_ratio": overlap_ratio(&stats).ok(),
        "empty_pools": stats.iter().filter(|s| s.pool_size == 0).count(),
        "fell_back": out.results.iter().filter(|r| r.fell_back).count(),
        "unknown_candidates": out.results.iter().map(|r| r.unknown_candidates).sum::<usize>(),
        "run_out": a.run_out,
    })
    .to_string())
}

fn metrics(run: &RunFile, qrels: &entrank::Qrels, recall_k: &[usize], mrr_k: &[usize]) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    for &k in recall_k {
        m.insert(format!("R@{k}"), json!(recall_at_k(run, qrels, k)?));
    }
    for &k in mrr_k {
        m.insert(format!("MRR@{k}"), json!(mrr_at_k(run, qrels, k)?));
    }
    Ok(m)
}

pub fn eval(a: EvalArgs) -> Result<String> {
    let qrels = load_qrels(reader(&a.qrels)?).with_context(|| format!("reading qrels {}", a.qrels.display()))?;
    let run = RunFile::read(reader(&a.run)?).with_context(|| format!("reading run {}", a.run.display()))?;
    let mut out = metrics(&run, &qrels, &a.recall_k, &a.mrr_k)?;
    out.insert("command".into(), json!("eval"));
    out.insert("judged_queries".into(), json!(qrels.len()));
    out.insert("run_queries".into(), json!(run.num_queries()));
    Ok(Value::Object(out).to_string())
}

pub fn sweep(a: SweepArgs) -> Result<String> {
    let Some(&max_k) = a.k_values.iter().max() else {
        bail!("--k-values is empty");
    };
    let ctx = Loaded::open(&a.retrieval, max_k)?;
    let docs = ctx.queries(&a.queries)?;
    let qrels = load_qrels(reader(&a.qrels)?)?;
    let retriever = ctx.retriever()?;
    let mut lines = Vec::with_capacity(a.k_values.len());
    for &k in &a.k_values {
        let config = PipelineConfig {
            k_query: k,
            depth: a.retrieval.depth,
            ..PipelineConfig::default()
        };
        let out = retriever.batch_run(&docs, &config, "sweep")?;
        let stats: Vec<_> = out.results.iter().filter_map(|r| r.candidates).collect();
        let mut line = metrics(&out.run, &qrels, &[1000], &[10])?;
        line.insert("command".into(), json!("sweep"));
        line.insert("k_query".into(), json!(k));
        line.insert(
            "mean_pool_size".into(),
            json!(stats.iter().map(|s| s.pool_size as f64).sum::<f64>() / stats.len().max(1) as f64),
        );
        line.insert("overlap_ratio".into(), json!(overlap_ratio(&stats).ok()));
        lines.push(Value::Object(line).to_string());
    }
    Ok(lines.join("\n"))
}

pub fn synth(a: SynthArgs) -> Result<String> {
    let spec = SynthCorpusSpec {
        image_count: a.num_images,
        query_count: a.num_queries,
        entities_per_query: a.entities_per_query,
        vocab_size: a.vocab,
        dimension: a.dim,
        seed: a.seed,
        noise_scale: a.noise,
    };
    let corpus = generate_synth_corpus(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    corpus.write_dir(&a.out)?;
    Ok(json!({
        "command": "synth",
        "spec": spec,
        "images": a.out.join(IMAGES_FILE),
        "queries": a.out.join(QUERIES_FILE),
        "qrels": a.out.join(QRELS_FILE),
        "images_fingerprint": hex(corpus.images.fingerprint()),
    })
    .to_string())
}

pub fn bench(a: BenchArgs) -> Result<String> {
    let ctx = Loaded::open(&a.retrieval, a.retrieval.k_query)?;
    let mut docs = ctx.queries(&a.queries)?;
    if let Some(n) = a.limit {
        docs.truncate(n);
    }
    let report = benchmark(&ctx.retriever()?, &docs, a.retrieval.k_query, a.retrieval.depth)?;
    let mut out = serde_json::to_value(&report)?;
    out["command"] = json!("bench");
    Ok(out.to_string())
}
