//! Text embeddings produced outside the engine, plus a deterministic mock
//! encoder so the whole pipeline runs without a neural model.
//!
//! A text embedding file is a binary file in the embedding-cache layout
//! (ids are entity or query ids) accompanied by a JSONL sidecar with one
//! `{"id": <u64>, "text": <string>}` object per line.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use twox_hash::XxHash3_64;

use crate::entity::{EntityKey, IndexError};
use crate::store::{read_records, EmbeddingRecord, EmbeddingStore, StoreError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("text has no tokens")]
    EmptyText,
    #[error("mock encoder dimension must be at least 2, got {0}")]
    InvalidDimension(usize),
    #[error("sidecar ids do not match embedding ids ({missing_in_sidecar} missing from sidecar, {missing_in_binary} missing from binary)")]
    SidecarIdMismatch {
        missing_in_sidecar: usize,
        missing_in_binary: usize,
    },
    #[error("sidecar line {line}: duplicate id {id}")]
    DuplicateSidecarId { line: usize, id: u64 },
    #[error("sidecar line {line}: {source}")]
    MalformedSidecar { line: usize, source: serde_json::Error },
    #[error("entity text for id {id} is invalid: {source}")]
    InvalidEntity { id: u64, source: IndexError },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

/// Anything that turns text into a vector of fixed dimension.
pub trait TextEncoder: Send + Sync {
    fn dimension(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f32>, EncoderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEncoderConfig {
    pub dimension: usize,
    pub seed: u64,
}

/// Bag-of-tokens hash encoder.
///
/// Each whitespace token is hashed (XXH3-64, seeded) into the seed of a
/// ChaCha8 generator, which draws `dimension` components uniformly from
/// `[-1, 1]`; the token vector is L2-normalized. The output is the
/// L2-normalized mean of the token vectors. Tokens are summed in sorted
/// order, so the result does not depend on token order.
#[derive(Debug, Clone)]
pub struct MockEncoder {
    config: MockEncoderConfig,
}

impl MockEncoder {
    pub fn new(config: MockEncoderConfig) -> Result<Self, EncoderError> {
        if config.dimension < 2 {
            return Err(EncoderError::InvalidDimension(config.dimension));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> MockEncoderConfig {
        self.config
    }

    fn token_direction(&self, token: &str) -> Vec<f64> {
        let seed = XxHash3_64::oneshot_with_seed(self.config.seed, token.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let mut v: Vec<f64> = (0..self.config.dimension)
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect();
            if normalize_in_place(&mut v) {
                return v;
            }
        }
    }
}

/// Scales `v` to unit L2 norm. Returns false (leaving `v` untouched) for a
/// zero vector.
pub(crate) fn normalize_in_place(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

impl TextEncoder for MockEncoder {
    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>, EncoderError> {
        let mut tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        tokens.sort_unstable();
        let mut acc = vec![0.0f64; self.config.dimension];
        for t in &tokens {
            for (a, x) in acc.iter_mut().zip(self.token_direction(t)) {
                *a += x;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        if !normalize_in_place(&mut acc) {
            // Opposite token directions cancelled exactly; fall back to the
            // first token alone.
            acc = self.token_direction(tokens[0]);
        }
        Ok(acc.into_iter().map(|x| x as f32).collect())
    }
}

/// Convenience wrapper around [`MockEncoder`].
pub fn mock_encode_text(text: &str, config: MockEncoderConfig) -> Result<Vec<f32>, EncoderError> {
    MockEncoder::new(config)?.encode(text)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SidecarLine {
    id: u64,
    text: String,
}

/// A loaded text embedding file: vectors plus their source strings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    store: EmbeddingStore,
    texts: BTreeMap<u64, String>,
}

impl TextEmbeddings {
    pub fn new(records: Vec<(u64, String, Vec<f32>)>, dimension: usize) -> Result<Self, EncoderError> {
        let mut texts = BTreeMap::new();
        let mut vecs = Vec::with_capacity(records.len());
        for (id, text, vector) in records {
            texts.insert(id, text);
            vecs.push(EmbeddingRecord::new(id, vector));
        }
        let store = EmbeddingStore::build(vecs, dimension)?;
        Ok(Self { store, texts })
    }

    pub fn dimension(&self) -> usize {
        self.store.dimension()
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<(&str, &[f32])> {
        let text = self.texts.get(&id)?;
        Some((text.as_str(), self.store.get_vector(id).ok()?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &str, &[f32])> + '_ {
        self.store.iter().map(|(id, v)| (id, self.texts[&id].as_str(), v))
    }

    /// Entity inputs for index building: texts normalized into keys.
    pub fn entity_inputs(&self) -> Result<Vec<(EntityKey, Vec<f32>)>, EncoderError> {
        self.iter()
            .map(|(id, text, v)| {
                EntityKey::normalize(text)
                    .map(|k| (k, v.to_vec()))
                    .map_err(|source| EncoderError::InvalidEntity { id, source })
            })
            .collect()
    }

    /// Writes the binary file and its sidecar, both ordered by id.
    pub fn save<B: Write, S: Write>(&self, binary: B, mut sidecar: S) -> Result<(), EncoderError> {
        self.store.save(binary)?;
        for (id, text) in &self.texts {
            let line = serde_json::to_string(&SidecarLine {
                id: *id,
                text: text.clone(),
            })
            .expect("sidecar line serializes");
            writeln!(sidecar, "{line}")?;
        }
        sidecar.flush()?;
        Ok(())
    }

    /// Loads a binary file (records in any order) and its sidecar, requiring
    /// identical id sets.
    pub fn load<B: io::Read, S: BufRead>(binary: B, sidecar: S) -> Result<Self, EncoderError> {
        let (dimension, records) = read_records(binary)?;
        let store = EmbeddingStore::build(records, dimension)?;

        let mut texts = BTreeMap::new();
        for (n, line) in sidecar.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: SidecarLine =
                serde_json::from_str(&line).map_err(|source| EncoderError::MalformedSidecar { line: n + 1, source })?;
            if texts.insert(parsed.id, parsed.text).is_some() {
                return Err(EncoderError::DuplicateSidecarId {
                    line: n + 1,
                    id: parsed.id,
                });
            }
        }

        let missing_in_sidecar = store.ids().iter().filter(|id| !texts.contains_key(id)).count();
        let missing_in_binary = texts.keys().filter(|id| !store.contains(**id)).count();
        if missing_in_sidecar + missing_in_binary > 0 {
            return Err(EncoderError::SidecarIdMismatch {
                missing_in_sidecar,
                missing_in_binary,
            });
        }
        Ok(Self { store, texts })
    }
}

/// Loads a text embedding file pair.
pub fn load_text_embeddings<B: io::Read, S: BufRead>(binary: B, sidecar: S) -> Result<TextEmbeddings, EncoderError> {
    TextEmbeddings::load(binary, sidecar)
}
