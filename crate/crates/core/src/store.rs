//! Immutable embedding cache: `(image id, f32 vector)` records sorted by id.
//!
//! # File layout
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"T2PSEMB1"
//! 8       4     format_version (u32 LE, = 1)
//! 12      4     dimension (u32 LE, >= 1)
//! 16      8     count (u64 LE)
//! 24      ...   count x { id: u64 LE, dimension x f32 LE }
//! ```
//!
//! No padding and no trailing bytes. Records are written in ascending id
//! order, which makes the serialized form canonical: two stores holding the
//! same records always produce identical bytes (and fingerprints).

use std::collections::HashMap;
use std::hash::Hasher;
use std::io::{self, Read, Write};
use std::sync::OnceLock;

use thiserror::Error;
use twox_hash::XxHash3_64;

pub const STORE_MAGIC: &[u8; 8] = b"T2PSEMB1";
pub const STORE_VERSION: u32 = 1;
pub const STORE_HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite component in vector for id {0}")]
    NonFiniteComponent(u64),
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("bad magic: not an embedding cache file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: header announces more records than present")]
    TruncatedPayload,
    #[error("trailing bytes after the last record")]
    TrailingBytes,
    #[error("ids not strictly increasing at record {0}")]
    UnsortedIds(u64),
    #[error("unknown id {0}")]
    UnknownId(u64),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

/// One image (or text) embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(id: u64, vector: Vec<f32>) -> Self {
        Self { id, vector }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub format_version: u32,
    pub dimension: u32,
    pub count: u64,
}

impl StoreHeader {
    fn encode(&self) -> [u8; STORE_HEADER_LEN] {
        let mut buf = [0u8; STORE_HEADER_LEN];
        buf[0..8].copy_from_slice(STORE_MAGIC);
        buf[8..12].copy_from_slice(&self.format_version.to_le_bytes());
        buf[12..16].copy_from_slice(&self.dimension.to_le_bytes());
        buf[16..24].copy_from_slice(&self.count.to_le_bytes());
        buf
    }

    fn decode(buf: &[u8; STORE_HEADER_LEN]) -> Result<Self, StoreError> {
        if &buf[0..8] != STORE_MAGIC {
            return Err(StoreError::BadMagic);
        }
        let format_version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if format_version != STORE_VERSION {
            return Err(StoreError::UnsupportedVersion(format_version));
        }
        let dimension = u32::from_le_bytes(buf[12..16].try_into().unwrap());
        if dimension == 0 {
            return Err(StoreError::ZeroDimension);
        }
        let count = u64::from_le_bytes(buf[16..24].try_into().unwrap());
        Ok(Self {
            format_version,
            dimension,
            count,
        })
    }

    /// Size in bytes of one serialized record.
    pub fn record_len(&self) -> usize {
        8 + 4 * self.dimension as usize
    }
}

/// The precomputed embedding cache.
///
/// Vectors are kept in one contiguous row-major slab; `ids[i]` owns row `i`.
/// The store never normalizes vectors: scores are raw dot products.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dimension: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
    id_map: HashMap<u64, usize>,
    /// Set when ids are exactly `first..first + len`; positions are then
    /// computed arithmetically.
    contiguous_from: Option<u64>,
    fingerprint: OnceLock<u64>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        // Compare bit patterns so that -0.0 != 0.0 and the check is exact.
        self.dimension == other.dimension
            && self.ids == other.ids
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_vector(id: u64, vector: &[f32], dimension: usize) -> Result<(), StoreError> {
    if vector.len() != dimension {
        return Err(StoreError::DimensionMismatch {
            expected: dimension,
            got: vector.len(),
        });
    }
    if vector.iter().any(|x| !x.is_finite()) {
        return Err(StoreError::NonFiniteComponent(id));
    }
    Ok(())
}

impl EmbeddingStore {
    /// Builds a store from records in any order. Ids must be unique.
    pub fn build(records: impl IntoIterator<Item = EmbeddingRecord>, dimension: usize) -> Result<Self, StoreError> {
        if dimension == 0 {
            return Err(StoreError::ZeroDimension);
        }
        let mut records: Vec<EmbeddingRecord> = records.into_iter().collect();
        for r in &records {
            check_vector(r.id, &r.vector, dimension)?;
        }
        records.sort_unstable_by_key(|r| r.id);
        if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(StoreError::DuplicateId(w[0].id));
        }

        let mut ids = Vec::with_capacity(records.len());
        let mut data = Vec::with_capacity(records.len() * dimension);
        for r in records {
            ids.push(r.id);
            data.extend_from_slice(&r.vector);
        }
        Ok(Self::from_sorted_parts(dimension, ids, data))
    }

    /// Builds a store from a row-major slab. `ids` must be strictly
    /// increasing and `data.len() == ids.len() * dimension`.
    pub fn from_rows(dimension: usize, ids: Vec<u64>, data: Vec<f32>) -> Result<Self, StoreError> {
        if dimension == 0 {
            return Err(StoreError::ZeroDimension);
        }
        if data.len() != ids.len() * dimension {
            return Err(StoreError::DimensionMismatch {
                expected: ids.len() * dimension,
                got: data.len(),
            });
        }
        if let Some(pos) = ids.windows(2).position(|w| w[0] >= w[1]) {
            return Err(if ids[pos] == ids[pos + 1] {
                StoreError::DuplicateId(ids[pos])
            } else {
                StoreError::UnsortedIds(pos as u64 + 1)
            });
        }
        for (pos, row) in data.chunks_exact(dimension).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFiniteComponent(ids[pos]));
            }
        }
        Ok(Self::from_sorted_parts(dimension, ids, data))
    }

    fn from_sorted_parts(dimension: usize, ids: Vec<u64>, data: Vec<f32>) -> Self {
        debug_assert_eq!(ids.len() * dimension, data.len());
        let contiguous_from = match (ids.first(), ids.last()) {
            (Some(&first), Some(&last)) if last - first == ids.len() as u64 - 1 => Some(first),
            _ => None,
        };
        let id_map = match contiguous_from {
            Some(_) => HashMap::new(),
            None => ids.iter().enumerate().map(|(pos, &id)| (id, pos)).collect(),
        };
        Self {
            dimension,
            ids,
            data,
            id_map,
            contiguous_from,
            fingerprint: OnceLock::new(),
        }
    }

    pub fn header(&self) -> StoreHeader {
        StoreHeader {
            format_version: STORE_VERSION,
            dimension: self.dimension as u32,
            count: self.ids.len() as u64,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// All ids in ascending order.
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Row position of `id`, if present.
    pub fn position(&self, id: u64) -> Option<usize> {
        if let Some(first) = self.contiguous_from {
            let offset = id.checked_sub(first)?;
            return (offset < self.ids.len() as u64).then_some(offset as usize);
        }
        self.id_map.get(&id).copied()
    }

    /// Vector stored at row `pos`.
    #[inline]
    pub fn row(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.dimension..(pos + 1) * self.dimension]
    }

    pub fn get_vector(&self, id: u64) -> Result<&[f32], StoreError> {
        self.position(id)
            .map(|pos| self.row(pos))
            .ok_or(StoreError::UnknownId(id))
    }

    pub fn contains(&self, id: u64) -> bool {
        self.position(id).is_some()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (u64, &[f32])> + '_ {
        self.ids.iter().copied().zip(self.data.chunks_exact(self.dimension))
    }

    /// Exact size of the serialized store in bytes.
    pub fn serialized_len(&self) -> u64 {
        STORE_HEADER_LEN as u64 + self.ids.len() as u64 * self.header().record_len() as u64
    }

    /// Writes the canonical binary form. Returns the number of bytes written.
    pub fn save<W: Write>(&self, mut sink: W) -> Result<u64, StoreError> {
        self.write_to(&mut sink)?;
        sink.flush()?;
        Ok(self.serialized_len())
    }

    fn write_to<W: Write>(&self, sink: &mut W) -> io::Result<()> {
        sink.write_all(&self.header().encode())?;
        let mut buf = Vec::with_capacity(self.header().record_len());
        for (id, vector) in self.iter() {
            buf.clear();
            buf.extend_from_slice(&id.to_le_bytes());
            for x in vector {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            sink.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads and validates a cache file.
    pub fn open<R: Read>(source: R) -> Result<Self, StoreError> {
        let (header, ids, data) = read_raw(source)?;
        if let Some(pos) = ids.windows(2).position(|w| w[0] >= w[1]) {
            return Err(StoreError::UnsortedIds(pos as u64 + 1));
        }
        for (pos, &id) in ids.iter().enumerate() {
            let row = &data[pos * header.dimension as usize..(pos + 1) * header.dimension as usize];
            if row.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFiniteComponent(id));
            }
        }
        Ok(Self::from_sorted_parts(header.dimension as usize, ids, data))
    }

    /// 64-bit checksum (XXH3) of the serialized store.
    ///
    /// Equal to hashing the bytes of the cache file this store was opened
    /// from, since serialization is canonical.
    pub fn fingerprint(&self) -> u64 {
        *self.fingerprint.get_or_init(|| {
            let mut hasher = HashingWriter(XxHash3_64::with_seed(0));
            self.write_to(&mut hasher).expect("writing to a hasher cannot fail");
            hasher.0.finish()
        })
    }
}

/// Checksum of raw bytes, identical to [`EmbeddingStore::fingerprint`] for
/// the bytes of a cache file.
pub fn fingerprint_bytes(bytes: &[u8]) -> u64 {
    XxHash3_64::oneshot_with_seed(0, bytes)
}

struct HashingWriter(XxHash3_64);

impl Write for HashingWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn read_exact_or_truncated<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<(), StoreError> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::TruncatedPayload,
        _ => StoreError::Io(e),
    })
}

/// Parses the binary layout without requiring sorted ids.
///
/// Used for raw embedding dumps that are fed to [`EmbeddingStore::build`].
pub(crate) fn read_raw<R: Read>(mut source: R) -> Result<(StoreHeader, Vec<u64>, Vec<f32>), StoreError> {
    let mut hbuf = [0u8; STORE_HEADER_LEN];
    source.read_exact(&mut hbuf).map_err(|e| match e.kind() {
        // Too short to even hold a header: treat as not-our-format.
        io::ErrorKind::UnexpectedEof => StoreError::BadMagic,
        _ => StoreError::Io(e),
    })?;
    let header = StoreHeader::decode(&hbuf)?;
    let dim = header.dimension as usize;

    // Cap preallocation so a corrupt count cannot trigger a huge allocation.
    let cap = header.count.min(1 << 20) as usize;
    let mut ids = Vec::with_capacity(cap);
    let mut data = Vec::with_capacity(cap * dim);
    let mut rec = vec![0u8; header.record_len()];
    for _ in 0..header.count {
        read_exact_or_truncated(&mut source, &mut rec)?;
        ids.push(u64::from_le_bytes(rec[0..8].try_into().unwrap()));
        data.extend(
            rec[8..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
    }
    let mut probe = [0u8; 1];
    loop {
        match source.read(&mut probe) {
            Ok(0) => break,
            Ok(_) => return Err(StoreError::TrailingBytes),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(StoreError::Io(e)),
        }
    }
    Ok((header, ids, data))
}

/// Reads records from a file in the cache layout, in file order, without
/// requiring sorted ids.
pub fn read_records<R: Read>(source: R) -> Result<(usize, Vec<EmbeddingRecord>), StoreError> {
    let (header, ids, data) = read_raw(source)?;
    let dim = header.dimension as usize;
    let records = ids
        .into_iter()
        .zip(data.chunks_exact(dim))
        .map(|(id, v)| EmbeddingRecord::new(id, v.to_vec()))
        .collect();
    Ok((dim, records))
}
