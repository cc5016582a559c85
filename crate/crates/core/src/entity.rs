//! Entity → top-k image candidate index.
//!
//! Each normalized entity string maps to the `k_build` images whose
//! embeddings have the highest dot product with the entity's embedding. The
//! index is built offline against one embedding cache (identified by its
//! fingerprint) and can later be extended with new entities against the
//! same cache.
//!
//! # File layout
//!
//! ```text
//! magic        8   b"T2PSEIX1"
//! version      4   u32 LE (= 1)
//! fingerprint  8   u64 LE, checksum of the embedding cache
//! k_build      4   u32 LE
//! entry_count  8   u64 LE
//! entries, keys in ascending UTF-8 byte order:
//!   key_len    4   u32 LE
//!   key        key_len bytes, UTF-8
//!   postings   4   u32 LE (L <= k_build)
//!   L x { id: u64 LE, score: f32 LE }
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::ranking::{top_k_scan, RankError, RankedList, ScoredId};
use crate::store::EmbeddingStore;

pub const INDEX_MAGIC: &[u8; 8] = b"T2PSEIX1";
pub const INDEX_VERSION: u32 = 1;
pub const INDEX_HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("entity is empty after normalization")]
    EmptyAfterNormalization,
    #[error("dimension mismatch for entity {key:?}: expected {expected}, got {got}")]
    DimensionMismatch { key: String, expected: usize, got: usize },
    #[error("non-finite component in embedding for entity {0:?}")]
    NonFiniteComponent(String),
    #[error("cannot build an entity index over an empty store")]
    EmptyStore,
    #[error("k_build must be between 1 and {}", u32::MAX)]
    InvalidKBuild,
    #[error("store fingerprint {store:#018x} does not match index fingerprint {index:#018x}")]
    FingerprintMismatch { index: u64, store: u64 },
    #[error("bad magic: not an entity index file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("malformed index: {0}")]
    Malformed(String),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

/// A normalized entity string: lowercased, whitespace runs collapsed to a
/// single space, trimmed, and non-empty.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityKey(String);

impl EntityKey {
    pub fn normalize(raw: &str) -> Result<Self, IndexError> {
        let folded = caseless::default_case_fold_str(raw);
        let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
        if collapsed.is_empty() {
            return Err(IndexError::EmptyAfterNormalization);
        }
        Ok(Self(collapsed))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Normalizes a raw entity string.
pub fn normalize_entity(raw: &str) -> Result<EntityKey, IndexError> {
    EntityKey::normalize(raw)
}

/// Counters from a build or extend call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IndexBuildReport {
    /// Entities whose postings were computed.
    pub indexed: usize,
    /// Keys repeated within the input; the last occurrence was kept.
    pub duplicate_keys: usize,
    /// Keys already in the index when extending; left untouched.
    pub existing_keys: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityIndex {
    store_fingerprint: u64,
    k_build: usize,
    entries: BTreeMap<EntityKey, RankedList>,
}

/// Collapses duplicate keys (last occurrence wins) and validates vectors.
fn dedup_input(
    entities: impl IntoIterator<Item = (EntityKey, Vec<f32>)>,
    dimension: usize,
) -> Result<(BTreeMap<EntityKey, Vec<f32>>, usize), IndexError> {
    let mut map = BTreeMap::new();
    let mut duplicates = 0;
    for (key, vector) in entities {
        if vector.len() != dimension {
            return Err(IndexError::DimensionMismatch {
                key: key.0,
                expected: dimension,
                got: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(IndexError::NonFiniteComponent(key.0));
        }
        if map.insert(key, vector).is_some() {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        log::warn!("{duplicates} duplicate entity key(s) in input; kept the last occurrence");
    }
    Ok((map, duplicates))
}

/// Top-`k` postings for one entity vector, scores rounded to f32.
///
/// Membership is decided at full precision; the stored order is the ranking
/// order over the rounded scores, so postings survive a save/open round trip
/// unchanged.
fn compute_postings(vector: &[f32], store: &EmbeddingStore, k: usize) -> RankedList {
    let scan = match top_k_scan(vector, store, k, None) {
        Ok(scan) => scan,
        Err(RankError::DimensionMismatch { .. } | RankError::ZeroK) => {
            unreachable!("validated before scanning")
        }
    };
    let mut entries: Vec<ScoredId> = scan.ranking.into_entries();
    for e in &mut entries {
        e.score = f64::from(e.score as f32);
    }
    // Stable: preserves the full-precision order where rounding keeps it.
    entries.sort_by(crate::ranking::rank_order);
    RankedList::from_ordered(entries)
}

fn compute_all(
    inputs: BTreeMap<EntityKey, Vec<f32>>,
    store: &EmbeddingStore,
    k: usize,
) -> Vec<(EntityKey, RankedList)> {
    let inputs: Vec<(EntityKey, Vec<f32>)> = inputs.into_iter().collect();
    inputs
        .into_par_iter()
        .map(|(key, v)| {
            let postings = compute_postings(&v, store, k);
            (key, postings)
        })
        .collect()
}

impl EntityIndex {
    /// An index with no entities, bound to `store`.
    pub fn empty(store: &EmbeddingStore, k_build: usize) -> Result<Self, IndexError> {
        if store.is_empty() {
            return Err(IndexError::EmptyStore);
        }
        if k_build == 0 || k_build > u32::MAX as usize {
            return Err(IndexError::InvalidKBuild);
        }
        Ok(Self {
            store_fingerprint: store.fingerprint(),
            k_build,
            entries: BTreeMap::new(),
        })
    }

    /// Builds postings for every entity against `store`.
    pub fn build(
        entities: impl IntoIterator<Item = (EntityKey, Vec<f32>)>,
        store: &EmbeddingStore,
        k_build: usize,
    ) -> Result<(Self, IndexBuildReport), IndexError> {
        let index = Self::empty(store, k_build)?;
        index.extend(entities, store)
    }

    /// Returns a new index with postings for the keys not already present.
    ///
    /// Existing keys keep their postings; `store` must be the cache the
    /// index was built against.
    pub fn extend(
        &self,
        entities: impl IntoIterator<Item = (EntityKey, Vec<f32>)>,
        store: &EmbeddingStore,
    ) -> Result<(Self, IndexBuildReport), IndexError> {
        if store.fingerprint() != self.store_fingerprint {
            return Err(IndexError::FingerprintMismatch {
                index: self.store_fingerprint,
                store: store.fingerprint(),
            });
        }
        let (mut inputs, duplicate_keys) = dedup_input(entities, store.dimension())?;
        let before = inputs.len();
        inputs.retain(|k, _| !self.entries.contains_key(k));
        let existing_keys = before - inputs.len();
        if existing_keys > 0 {
            log::warn!("{existing_keys} entity key(s) already indexed; left untouched");
        }

        let mut next = self.clone();
        let computed = compute_all(inputs, store, self.k_build);
        let indexed = computed.len();
        next.entries.extend(computed);
        Ok((
            next,
            IndexBuildReport {
                indexed,
                duplicate_keys,
                existing_keys,
            },
        ))
    }

    pub fn store_fingerprint(&self) -> u64 {
        self.store_fingerprint
    }

    pub fn k_build(&self) -> usize {
        self.k_build
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Postings for a normalized key; `None` means the entity is unknown.
    pub fn lookup(&self, key: &EntityKey) -> Option<&RankedList> {
        self.entries.get(key)
    }

    /// Normalizes `raw` and looks it up.
    pub fn lookup_raw(&self, raw: &str) -> Option<&RankedList> {
        EntityKey::normalize(raw).ok().and_then(|k| self.entries.get(&k))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EntityKey, &RankedList)> {
        self.entries.iter()
    }

    /// Fails unless `store` is the cache this index was built against.
    pub fn check_store(&self, store: &EmbeddingStore) -> Result<(), IndexError> {
        if store.fingerprint() == self.store_fingerprint {
            Ok(())
        } else {
            Err(IndexError::FingerprintMismatch {
                index: self.store_fingerprint,
                store: store.fingerprint(),
            })
        }
    }

    /// Writes the canonical binary form; returns bytes written.
    pub fn save<W: Write>(&self, mut sink: W) -> Result<u64, IndexError> {
        let mut buf = Vec::with_capacity(INDEX_HEADER_LEN);
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.store_fingerprint.to_le_bytes());
        buf.extend_from_slice(&(self.k_build as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        sink.write_all(&buf)?;
        let mut written = buf.len() as u64;
        for (key, postings) in &self.entries {
            buf.clear();
            let kb = key.as_str().as_bytes();
            buf.extend_from_slice(&(kb.len() as u32).to_le_bytes());
            buf.extend_from_slice(kb);
            buf.extend_from_slice(&(postings.len() as u32).to_le_bytes());
            for e in postings.entries() {
                buf.extend_from_slice(&e.id.to_le_bytes());
                buf.extend_from_slice(&(e.score as f32).to_le_bytes());
            }
            sink.write_all(&buf)?;
            written += buf.len() as u64;
        }
        sink.flush()?;
        Ok(written)
    }

    /// Reads and validates an index file.
    pub fn open<R: Read>(mut source: R) -> Result<Self, IndexError> {
        let mut header = [0u8; INDEX_HEADER_LEN];
        source.read_exact(&mut header).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => IndexError::BadMagic,
            _ => IndexError::Io(e),
        })?;
        if &header[0..8] != INDEX_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let store_fingerprint = u64::from_le_bytes(header[12..20].try_into().unwrap());
        let k_build = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[24..32].try_into().unwrap());
        if k_build == 0 {
            return Err(IndexError::Malformed("k_build is zero".into()));
        }

        let mut entries = BTreeMap::new();
        let mut prev: Option<EntityKey> = None;
        for _ in 0..count {
            let key_len = read_u32(&mut source)? as usize;
            let mut kb = vec![0u8; key_len];
            read_exact(&mut source, &mut kb)?;
            let text =
                String::from_utf8(kb).map_err(|_| IndexError::Malformed("entity key is not valid UTF-8".into()))?;
            let key = EntityKey::normalize(&text)
                .ok()
                .filter(|k| k.as_str() == text)
                .ok_or_else(|| IndexError::Malformed(format!("key {text:?} is not normalized")))?;
            if prev.as_ref().is_some_and(|p| *p >= key) {
                return Err(IndexError::Malformed(format!("key {text:?} out of order")));
            }

            let len = read_u32(&mut source)? as usize;
            if len > k_build {
                return Err(IndexError::Malformed(format!(
                    "postings for {text:?} exceed k_build ({len} > {k_build})"
                )));
            }
            let mut raw = vec![0u8; len * 12];
            read_exact(&mut source, &mut raw)?;
            let postings = RankedList::from_ordered(
                raw.chunks_exact(12)
                    .map(|c| {
                        let id = u64::from_le_bytes(c[0..8].try_into().unwrap());
                        let score = f32::from_le_bytes(c[8..12].try_into().unwrap());
                        ScoredId::new(id, f64::from(score))
                    })
                    .collect(),
            );
            if !postings.is_canonical() {
                return Err(IndexError::Malformed(format!(
                    "postings for {text:?} are not in ranking order"
                )));
            }
            prev = Some(key.clone());
            entries.insert(key, postings);
        }

        let mut probe = [0u8; 1];
        if source.read(&mut probe)? != 0 {
            return Err(IndexError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            store_fingerprint,
            k_build,
            entries,
        })
    }
}

fn read_exact<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<(), IndexError> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => IndexError::TruncatedPayload,
        _ => IndexError::Io(e),
    })
}

fn read_u32<R: Read>(source: &mut R) -> Result<u32, IndexError> {
    let mut b = [0u8; 4];
    read_exact(source, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
