//! Flat inner-product index over passage vectors.
//!
//! Retrieval is an exact scan: every stored vector is scored against the
//! query by dot product and the top k survive. No approximation, no
//! quantization. Ties on score break toward the lexicographically
//! smaller passage id so results are reproducible across runs and
//! platforms.
//!
//! On disk an index is a directory holding `vectors.qpve` and `ids.txt`.
//! The `.qpve` file is little-endian: the magic `QPVE`, a u32 format
//! version (currently 1), a u32 dimension, a u64 record count, then per
//! record a u32 key length, the UTF-8 key, and `dim` f32 components.
//! `ids.txt` repeats the keys one per line in record order; load fails
//! if the two disagree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::Vector;

pub const VECTORS_FILE: &str = "vectors.qpve";
pub const IDS_FILE: &str = "ids.txt";

const MAGIC: &[u8; 4] = b"QPVE";
const FORMAT_VERSION: u32 = 1;

/// One retrieval result. `rank` is 1-based within its result list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub passage_id: String,
    pub score: f32,
    pub rank: usize,
}

#[derive(Debug, Error)]
pub enum VindexError {
    #[error("vector for `{id}` has dim {found}, index dim is {expected}")]
    DimMismatch { id: String, expected: usize, found: usize },
    #[error("query has dim {found}, index dim is {expected}")]
    QueryDimMismatch { expected: usize, found: usize },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("id `{0}` is empty or contains a newline")]
    InvalidId(String),
    #[error("vector for `{0}` contains a non-finite component")]
    NonFinite(String),
    #[error("index dimension must be >= 1")]
    ZeroDim,
    #[error("not a vector index file (bad magic)")]
    BadMagic,
    #[error("unsupported index format version {0}")]
    UnsupportedVersion(u32),
    #[error("index file is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("ids.txt line {line} is `{in_ids}` but vectors.qpve has `{in_vectors}`")]
    IdMismatch { line: usize, in_ids: String, in_vectors: String },
    #[error("ids.txt has {ids} entries, vectors.qpve has {vectors}")]
    CountMismatch { ids: usize, vectors: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dot product with plain f32 accumulation. Panics on length mismatch;
/// callers validate dimensions first.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "dot product dimension mismatch");
    let mut sum = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        sum += x * y;
    }
    sum
}

/// In-memory flat index. Vectors are stored contiguously in insertion
/// order; `rank_by_pos` caches each position's rank in ascending id
/// order so score ties break on an integer compare.
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    rank_by_pos: Vec<usize>,
}

impl std::fmt::Debug for VectorIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorIndex")
            .field("dim", &self.dim)
            .field("len", &self.ids.len())
            .finish_non_exhaustive()
    }
}

/// Max-heap key: higher score wins, then smaller id rank.
#[derive(PartialEq)]
struct HeapKey {
    score: f32,
    id_rank: usize,
}

impl Eq for HeapKey {}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id_rank.cmp(&self.id_rank))
    }
}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl VectorIndex {
    /// Builds an index from `(id, vector)` pairs. Every vector must have
    /// dimension `dim` with finite components, and ids must be unique,
    /// non-empty, and newline-free.
    pub fn build(dim: usize, entries: Vec<(String, Vector)>) -> Result<Self, VindexError> {
        if dim == 0 {
            return Err(VindexError::ZeroDim);
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        let mut seen = HashSet::new();
        for (id, vector) in entries {
            if id.is_empty() || id.contains('\n') {
                return Err(VindexError::InvalidId(id));
            }
            if vector.len() != dim {
                return Err(VindexError::DimMismatch {
                    id,
                    expected: dim,
                    found: vector.len(),
                });
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(VindexError::NonFinite(id));
            }
            if !seen.insert(id.clone()) {
                return Err(VindexError::DuplicateId(id));
            }
            ids.push(id);
            vectors.extend_from_slice(&vector);
        }
        let rank_by_pos = compute_id_ranks(&ids);
        Ok(VectorIndex { dim, ids, vectors, rank_by_pos })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, pos: usize) -> &[f32] {
        &self.vectors[pos * self.dim..(pos + 1) * self.dim]
    }

    /// Exact top-k by inner product, ordered by (score desc, id asc),
    /// ranks 1-based. Returns all entries when `k >= len`, and an empty
    /// list when `k == 0`.
    pub fn top_k(&self, query: &[f32], k: usize) -> Result<Vec<ScoredHit>, VindexError> {
        if query.len() != self.dim {
            return Err(VindexError::QueryDimMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        // Min-heap of the best k seen so far, via Reverse ordering.
        let mut heap: BinaryHeap<std::cmp::Reverse<(HeapKey, usize)>> =
            BinaryHeap::with_capacity(k + 1);
        for pos in 0..self.len() {
            let key = HeapKey {
                score: dot(query, self.vector(pos)),
                id_rank: self.rank_by_pos[pos],
            };
            heap.push(std::cmp::Reverse((key, pos)));
            if heap.len() > k {
                heap.pop();
            }
        }
        let mut selected: Vec<(HeapKey, usize)> =
            heap.into_iter().map(|r| r.0).collect();
        selected.sort_by(|a, b| b.0.cmp(&a.0));
        Ok(selected
            .into_iter()
            .enumerate()
            .map(|(i, (key, pos))| ScoredHit {
                passage_id: self.ids[pos].clone(),
                score: key.score,
                rank: i + 1,
            })
            .collect())
    }

    /// Writes `vectors.qpve` and `ids.txt` into `dir`, creating it if
    /// needed.
    pub fn save(&self, dir: &Path) -> Result<(), VindexError> {
        std::fs::create_dir_all(dir)?;
        write_qpve(
            &dir.join(VECTORS_FILE),
            self.dim,
            self.ids.iter().enumerate().map(|(pos, id)| (id.as_str(), self.vector(pos))),
        )?;
        let mut ids_out = BufWriter::new(File::create(dir.join(IDS_FILE))?);
        for id in &self.ids {
            writeln!(ids_out, "{id}")?;
        }
        ids_out.flush()?;
        Ok(())
    }

    /// Loads an index directory written by [`VectorIndex::save`],
    /// validating magic, version, record framing, and that `ids.txt`
    /// matches the keys embedded in the vector file.
    pub fn load(dir: &Path) -> Result<Self, VindexError> {
        let (dim, entries) = read_qpve(&dir.join(VECTORS_FILE))?;
        let ids_file = BufReader::new(File::open(dir.join(IDS_FILE))?);
        let listed: Vec<String> = ids_file.lines().collect::<Result<_, _>>()?;
        if listed.len() != entries.len() {
            return Err(VindexError::CountMismatch {
                ids: listed.len(),
                vectors: entries.len(),
            });
        }
        for (i, (listed_id, (embedded_id, _))) in listed.iter().zip(&entries).enumerate() {
            if listed_id != embedded_id {
                return Err(VindexError::IdMismatch {
                    line: i + 1,
                    in_ids: listed_id.clone(),
                    in_vectors: embedded_id.clone(),
                });
            }
        }
        VectorIndex::build(dim, entries)
    }
}

/// Writes key/vector records in the `.qpve` layout. Every vector must
/// have length `dim`.
pub fn write_qpve<'a>(
    path: &Path,
    dim: usize,
    entries: impl Iterator<Item = (&'a str, &'a [f32])>,
) -> Result<(), VindexError> {
    if dim == 0 {
        return Err(VindexError::ZeroDim);
    }
    // count goes in the header, so buffer the records first
    let mut body = Vec::new();
    let mut count = 0u64;
    for (key, vector) in entries {
        if vector.len() != dim {
            return Err(VindexError::DimMismatch {
                id: key.to_string(),
                expected: dim,
                found: vector.len(),
            });
        }
        body.write_u32::<LittleEndian>(key.len() as u32)?;
        body.extend_from_slice(key.as_bytes());
        for v in vector {
            body.write_f32::<LittleEndian>(*v)?;
        }
        count += 1;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u64::<LittleEndian>(count)?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Reads a `.qpve` file back into `(dim, entries)` in record order,
/// validating magic, version, and framing. Keys are not deduplicated
/// here; [`VectorIndex::build`] enforces uniqueness for indexes.
pub fn read_qpve(path: &Path) -> Result<(usize, Vec<(String, Vector)>), VindexError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(VindexError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != FORMAT_VERSION {
        return Err(VindexError::UnsupportedVersion(version));
    }
    let dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if dim == 0 {
        return Err(VindexError::ZeroDim);
    }
    let count = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let key_len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut key = vec![0u8; key_len];
        r.read_exact(&mut key).map_err(truncated)?;
        let key = String::from_utf8(key)
            .map_err(|_| VindexError::Corrupt("key is not UTF-8".into()))?;
        let mut vector = vec![0.0f32; dim];
        r.read_f32_into::<LittleEndian>(&mut vector).map_err(truncated)?;
        entries.push((key, vector));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(VindexError::Corrupt("trailing bytes after last record".into()));
    }
    Ok((dim, entries))
}

fn truncated(e: std::io::Error) -> VindexError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        VindexError::Corrupt("unexpected end of file".into())
    } else {
        VindexError::Io(e)
    }
}

/// Rank of each position when ids are sorted ascending: the smallest id
/// gets rank 0.
fn compute_id_ranks(ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let mut rank = vec![0usize; ids.len()];
    for (r, pos) in order.into_iter().enumerate() {
        rank[pos] = r;
    }
    rank
}
