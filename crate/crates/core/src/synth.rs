//! Deterministic synthetic corpora with planted relevance.
//!
//! Layout of a generated corpus:
//!
//! * `vocab_size` entities named `entity00000`, `entity00001`, ...; each
//!   entity's embedding is the mock encoding of its name.
//! * `image_count` images with ids `0..image_count`, uniformly distributed
//!   on the unit sphere.
//! * `query_count` queries with ids `1..=query_count`. Each draws
//!   `entities_per_query` distinct entities and owns one distinct target
//!   image, which is overwritten with the normalized mean of its entity
//!   directions plus a random unit component scaled by [`TARGET_SPREAD`].
//! * Each query's summary embedding is its target vector plus a random
//!   perturbation of norm `noise_scale`, renormalized. With
//!   `noise_scale = 0` the summary is bit-identical to the target.
//! * Qrels mark the target as the single relevant image.
//!
//! Everything is a pure function of the spec.

use std::fs::File;
use std::io::{self, BufWriter};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::encoder::{normalize_in_place, EncoderError, MockEncoder, MockEncoderConfig, TextEmbeddings, TextEncoder};
use crate::eval::Qrels;
use crate::query::{write_query_lines, QueryLine};
use crate::store::{EmbeddingStore, StoreError};

/// Weight of the random component mixed into each planted target.
pub const TARGET_SPREAD: f64 = 1.2;

pub const IMAGES_FILE: &str = "images.emb";
pub const ENTITIES_FILE: &str = "entities.emb";
pub const SUMMARIES_FILE: &str = "summaries.emb";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const QRELS_FILE: &str = "qrels.txt";

/// Sidecar path for a text embedding binary: `<binary>.jsonl`.
pub fn sidecar_path(binary: &Path) -> std::path::PathBuf {
    let mut s = binary.as_os_str().to_owned();
    s.push(".jsonl");
    s.into()
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SynthCorpusSpec {
    pub image_count: usize,
    pub query_count: usize,
    pub entities_per_query: usize,
    pub vocab_size: usize,
    pub dimension: usize,
    pub seed: u64,
    pub noise_scale: f64,
}

impl SynthCorpusSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.image_count == 0 || self.query_count == 0 || self.entities_per_query == 0 || self.vocab_size == 0 {
            return bad("all counts must be positive");
        }
        if self.dimension < 2 {
            return bad("dimension must be at least 2");
        }
        if !(0.0..1.0).contains(&self.noise_scale) {
            return bad("noise_scale must be in [0, 1)");
        }
        if self.entities_per_query > self.vocab_size {
            return bad("entities_per_query exceeds vocab_size");
        }
        if self.query_count > self.image_count {
            return bad("query_count exceeds image_count (each query needs its own target)");
        }
        Ok(())
    }
}

pub fn entity_name(i: usize) -> String {
    format!("entity{i:05}")
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthCorpusSpec,
    pub images: EmbeddingStore,
    /// Vocabulary embeddings; ids are vocabulary positions.
    pub entities: TextEmbeddings,
    /// Summary embeddings keyed by query id.
    pub summaries: TextEmbeddings,
    pub queries: Vec<QueryLine>,
    pub qrels: Qrels,
    /// `(query_id, target image id)`, ascending by query id.
    pub targets: Vec<(u64, u64)>,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize_in_place(&mut v) {
            return v;
        }
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Generates a corpus. Same spec, same output, bit for bit.
pub fn generate_synth_corpus(spec: &SynthCorpusSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let dim = spec.dimension;
    let encoder = MockEncoder::new(MockEncoderConfig {
        dimension: dim,
        seed: spec.seed,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut entity_records = Vec::with_capacity(spec.vocab_size);
    let mut entity_dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.vocab_size);
    for i in 0..spec.vocab_size {
        let name = entity_name(i);
        let v = encoder.encode(&name)?;
        entity_dirs.push(v.iter().map(|&x| f64::from(x)).collect());
        entity_records.push((i as u64, name, v));
    }

    let mut data: Vec<f32> = Vec::with_capacity(spec.image_count * dim);
    for _ in 0..spec.image_count {
        data.extend(to_f32(&random_unit(&mut rng, dim)));
    }

    let target_ids = sample(&mut rng, spec.image_count, spec.query_count).into_vec();
    let mut queries = Vec::with_capacity(spec.query_count);
    let mut summaries = Vec::with_capacity(spec.query_count);
    let mut qrels = Qrels::new();
    let mut targets = Vec::with_capacity(spec.query_count);
    for (q, &target) in target_ids.iter().enumerate() {
        let query_id = q as u64 + 1;
        let mut chosen = sample(&mut rng, spec.vocab_size, spec.entities_per_query).into_vec();
        chosen.sort_unstable();

        let mut centre = vec![0.0f64; dim];
        for &e in &chosen {
            for (c, x) in centre.iter_mut().zip(&entity_dirs[e]) {
                *c += x;
            }
        }
        if !normalize_in_place(&mut centre) {
            centre = random_unit(&mut rng, dim);
        }
        let spread = random_unit(&mut rng, dim);
        let mut planted: Vec<f64> = centre.iter().zip(&spread).map(|(c, s)| c + TARGET_SPREAD * s).collect();
        normalize_in_place(&mut planted);
        let planted = to_f32(&planted);

        let noise = random_unit(&mut rng, dim);
        let summary = if spec.noise_scale == 0.0 {
            planted.clone()
        } else {
            let mut s: Vec<f64> = planted
                .iter()
                .zip(&noise)
                .map(|(&t, n)| f64::from(t) + spec.noise_scale * n)
                .collect();
            normalize_in_place(&mut s);
            to_f32(&s)
        };

        data[target * dim..(target + 1) * dim].copy_from_slice(&planted);

        // Entities are emitted title-cased to exercise normalization.
        let entities = chosen.iter().map(|&e| title_case(&entity_name(e))).collect();
        queries.push(QueryLine {
            query_id,
            entities,
            summary_text: None,
            summary_embedding_id: Some(query_id),
        });
        summaries.push((query_id, format!("synthetic summary {query_id}"), summary));
        qrels.insert(query_id, target as u64);
        targets.push((query_id, target as u64));
    }

    let images = EmbeddingStore::from_rows(dim, (0..spec.image_count as u64).collect(), data)?;
    Ok(SynthCorpus {
        spec: *spec,
        images,
        entities: TextEmbeddings::new(entity_records, dim)?,
        summaries: TextEmbeddings::new(summaries, dim)?,
        queries,
        qrels,
        targets,
    })
}

fn title_case(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

impl SynthCorpus {
    /// Writes the corpus files into `dir` (which must exist).
    pub fn write_dir(&self, dir: &Path) -> Result<(), SynthError> {
        let create = |name: &str| -> io::Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        self.images.save(create(IMAGES_FILE)?)?;
        for (name, emb) in [(ENTITIES_FILE, &self.entities), (SUMMARIES_FILE, &self.summaries)] {
            let bin = dir.join(name);
            emb.save(
                BufWriter::new(File::create(&bin)?),
                BufWriter::new(File::create(sidecar_path(&bin))?),
            )?;
        }
        write_query_lines(&self.queries, create(QUERIES_FILE)?)?;
        self.qrels.write(create(QRELS_FILE)?)?;
        Ok(())
    }
}
