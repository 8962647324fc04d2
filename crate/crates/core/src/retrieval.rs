//! Chunk-embedding gallery with exact and inverted-file (IVF) cosine search.
//!
//! A gallery track's distance to a query track is the smallest cosine
//! distance over all (query chunk, gallery chunk) pairs.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use crate::align::ChunkEmbedding;
use crate::binio::*;
use crate::nn::Rng;

const EMB_MAGIC: &[u8; 4] = b"EMBD";
const EMB_VERSION: u32 = 1;
const IDX_MAGIC: &[u8; 4] = b"IDXF";
const IDX_VERSION: u32 = 1;
const KMEANS_ITERS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("vector dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cosine distance of a zero vector")]
    ZeroVector,
    #[error("index is empty")]
    EmptyIndex,
    #[error("no query chunks")]
    EmptyQuery,
    #[error("invalid embedding or index file: {0}")]
    InvalidFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `1 - u.v / (|u| |v|)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f32], v: &[f32]) -> Result<f64, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        dot += a as f64 * b as f64;
        nu += a as f64 * a as f64;
        nv += b as f64 * b as f64;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((1.0 - dot / (nu.sqrt() * nv.sqrt())).clamp(0.0, 2.0))
}

/// Sequential f64 dot product; the one similarity every search path uses.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        s += x as f64 * y as f64;
    }
    s
}

pub fn normalize(v: &[f32]) -> Result<Vec<f32>, RetrievalError> {
    let n = dot(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

// ----------------------------------------------------------------------
// EMB1 embedding files
// ----------------------------------------------------------------------

/// "EMB1": magic, u32 version, u32 count, u32 dim, then per entry
/// track_id, work_id (u32-length-prefixed UTF-8), u32 chunk_index,
/// f64 start_s, dim f32.
pub fn write_embeddings<W: Write>(w: &mut W, entries: &[ChunkEmbedding]) -> Result<(), RetrievalError> {
    let dim = entries.first().map_or(0, |e| e.vector.len());
    if let Some(e) = entries.iter().find(|e| e.vector.len() != dim) {
        return Err(RetrievalError::DimensionMismatch {
            expected: dim,
            got: e.vector.len(),
        });
    }
    w.write_all(EMB_MAGIC)?;
    write_u32(w, EMB_VERSION)?;
    write_u32(w, entries.len() as u32)?;
    write_u32(w, dim as u32)?;
    for e in entries {
        write_str(w, &e.track_id)?;
        write_str(w, &e.work_id)?;
        write_u32(w, e.chunk_index)?;
        write_f64(w, e.start_s)?;
        write_f32s(w, &e.vector)?;
    }
    Ok(())
}

pub fn read_embeddings<R: Read>(r: &mut R) -> Result<Vec<ChunkEmbedding>, RetrievalError> {
    let bad = |e: std::io::Error| RetrievalError::InvalidFile(e.to_string());
    expect_magic(r, EMB_MAGIC).map_err(bad)?;
    let version = read_u32(r).map_err(bad)?;
    if version != EMB_VERSION {
        return Err(RetrievalError::InvalidFile(format!("unsupported version {version}")));
    }
    let count = read_u32(r).map_err(bad)? as usize;
    let dim = read_u32(r).map_err(bad)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        out.push(ChunkEmbedding {
            track_id: read_str(r, 1 << 16).map_err(bad)?,
            work_id: read_str(r, 1 << 16).map_err(bad)?,
            chunk_index: read_u32(r).map_err(bad)?,
            start_s: read_f64(r).map_err(bad)?,
            vector: read_f32s(r, dim).map_err(bad)?,
        });
    }
    Ok(out)
}

pub fn embeddings_to_bytes(entries: &[ChunkEmbedding]) -> Result<Vec<u8>, RetrievalError> {
    let mut b = Vec::new();
    write_embeddings(&mut b, entries)?;
    Ok(b)
}

pub fn save_embeddings(path: &Path, entries: &[ChunkEmbedding]) -> Result<(), RetrievalError> {
    Ok(write_atomic(path, &embeddings_to_bytes(entries)?)?)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<ChunkEmbedding>, RetrievalError> {
    let bytes = std::fs::read(path)?;
    read_embeddings(&mut bytes.as_slice())
}

// ----------------------------------------------------------------------
// index
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum IndexMode {
    Exact,
    /// k-means inverted lists over `round(sqrt(N))` partitions; a query
    /// scans the `probes` partitions whose centroids are most similar.
    Ann { probes: usize, seed: u64 },
}

impl IndexMode {
    pub fn ann() -> Self {
        IndexMode::Ann { probes: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Ivf {
    probes: usize,
    /// `n_partitions x dim`, unit rows.
    centroids: Vec<Vec<f32>>,
    lists: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    /// Entries with unit-normalized vectors.
    pub entries: Vec<ChunkEmbedding>,
    pub dim: usize,
    ivf: Option<Ivf>,
}

/// Gallery track ranked for one query track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackHit {
    pub track_id: String,
    pub work_id: String,
    pub distance: f64,
    /// Position of the closest query chunk within the query list.
    pub query_chunk: usize,
    /// `chunk_index` of the closest gallery chunk.
    pub gallery_chunk: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryResult {
    pub hits: Vec<TrackHit>,
}

fn kmeans(vectors: &[&[f32]], k: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = Rng::seed_from_u64(seed);
    let dim = vectors[0].len();
    let mut centroids: Vec<Vec<f32>> = sample(&mut rng, vectors.len(), k)
        .into_iter()
        .map(|i| vectors[i].to_vec())
        .collect();
    let mut assign = vec![usize::MAX; vectors.len()];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, v) in vectors.iter().enumerate() {
            let best = nearest_centroid(&centroids, v);
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        for (i, v) in vectors.iter().enumerate() {
            for (s, &x) in sums[assign[i]].iter_mut().zip(v.iter()) {
                *s += x as f64;
            }
        }
        for (c, s) in centroids.iter_mut().zip(sums) {
            let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            // an empty partition keeps its previous centroid
            if n > 0.0 {
                *c = s.iter().map(|x| (x / n) as f32).collect();
            }
        }
    }
    centroids
}

fn nearest_centroid(centroids: &[Vec<f32>], v: &[f32]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let s = dot(c, v);
        if s > best_sim {
            best_sim = s;
            best = j;
        }
    }
    best
}

impl GalleryIndex {
    pub fn build(embeddings: &[ChunkEmbedding], mode: IndexMode) -> Result<Self, RetrievalError> {
        let first = embeddings.first().ok_or(RetrievalError::EmptyIndex)?;
        let dim = first.vector.len();
        let mut entries = Vec::with_capacity(embeddings.len());
        for e in embeddings {
            if e.vector.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: e.vector.len(),
                });
            }
            entries.push(ChunkEmbedding {
                vector: normalize(&e.vector)?,
                ..e.clone()
            });
        }
        let ivf = match mode {
            IndexMode::Exact => None,
            IndexMode::Ann { probes, seed } => {
                let k = ((entries.len() as f64).sqrt().round() as usize).clamp(1, entries.len());
                let vecs: Vec<&[f32]> = entries.iter().map(|e| e.vector.as_slice()).collect();
                let centroids = kmeans(&vecs, k, seed);
                let mut lists = vec![Vec::new(); k];
                for (i, v) in vecs.iter().enumerate() {
                    lists[nearest_centroid(&centroids, v)].push(i as u32);
                }
                Some(Ivf {
                    probes: probes.max(1),
                    centroids,
                    lists,
                })
            }
        };
        Ok(Self { entries, dim, ivf })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_ann(&self) -> bool {
        self.ivf.is_some()
    }

    pub fn n_partitions(&self) -> usize {
        self.ivf.as_ref().map_or(0, |i| i.centroids.len())
    }

    /// Entry positions a query for `q` (unit) scans.
    fn candidates(&self, q: &[f32]) -> Vec<usize> {
        match &self.ivf {
            None => (0..self.entries.len()).collect(),
            Some(ivf) => {
                let mut order: Vec<(f64, usize)> = ivf.centroids.iter().enumerate().map(|(j, c)| (dot(c, q), j)).collect();
                order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let mut out: Vec<usize> = order
                    .iter()
                    .take(ivf.probes)
                    .flat_map(|&(_, j)| ivf.lists[j].iter().map(|&i| i as usize))
                    .collect();
                out.sort_unstable();
                out
            }
        }
    }

    /// The `k` nearest entries to `q` as `(entry position, cosine distance)`,
    /// ties broken by position.
    pub fn search_vector(&self, q: &[f32], k: usize) -> Result<Vec<(usize, f64)>, RetrievalError> {
        if q.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        let q = normalize(q)?;
        let mut scored: Vec<(usize, f64)> = self
            .candidates(&q)
            .into_iter()
            .map(|i| (i, 1.0 - dot(&q, &self.entries[i].vector)))
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Ranks gallery tracks by their closest chunk pair to `query_chunks`
    /// and returns the top `k` (ties by track id). Tracks in `exclude` are
    /// left out.
    pub fn query(&self, query_chunks: &[Vec<f32>], k: usize, exclude: &[&str]) -> Result<QueryResult, RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query_chunks.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let mut best: HashMap<&str, TrackHit> = HashMap::new();
        for (qi, q) in query_chunks.iter().enumerate() {
            if q.len() != self.dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: self.dim,
                    got: q.len(),
                });
            }
            let q = normalize(q)?;
            for i in self.candidates(&q) {
                let e = &self.entries[i];
                if exclude.contains(&e.track_id.as_str()) {
                    continue;
                }
                let d = 1.0 - dot(&q, &e.vector);
                let better = match best.get(e.track_id.as_str()) {
                    None => true,
                    Some(h) => (d, qi, e.chunk_index) < (h.distance, h.query_chunk, h.gallery_chunk),
                };
                if better {
                    best.insert(
                        &e.track_id,
                        TrackHit {
                            track_id: e.track_id.clone(),
                            work_id: e.work_id.clone(),
                            distance: d,
                            query_chunk: qi,
                            gallery_chunk: e.chunk_index,
                        },
                    );
                }
            }
        }
        let mut hits: Vec<TrackHit> = best.into_values().collect();
        hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.track_id.cmp(&b.track_id)));
        hits.truncate(k);
        Ok(QueryResult { hits })
    }

    /// "IDXF": magic, u32 version, u32 dim, u8 ann flag, then for ANN u32
    /// probes, u32 partitions, centroids, and per list u32 length + entry
    /// ids; finally the normalized entries in EMB1 layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>, RetrievalError> {
        let mut b = Vec::new();
        b.extend_from_slice(IDX_MAGIC);
        write_u32(&mut b, IDX_VERSION)?;
        write_u32(&mut b, self.dim as u32)?;
        match &self.ivf {
            None => b.push(0),
            Some(ivf) => {
                b.push(1);
                write_u32(&mut b, ivf.probes as u32)?;
                write_u32(&mut b, ivf.centroids.len() as u32)?;
                for c in &ivf.centroids {
                    write_f32s(&mut b, c)?;
                }
                for l in &ivf.lists {
                    write_u32(&mut b, l.len() as u32)?;
                    for &i in l {
                        write_u32(&mut b, i)?;
                    }
                }
            }
        }
        write_embeddings(&mut b, &self.entries)?;
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let r = &mut &bytes[..];
        let bad = |e: std::io::Error| RetrievalError::InvalidFile(e.to_string());
        expect_magic(r, IDX_MAGIC).map_err(bad)?;
        let version = read_u32(r).map_err(bad)?;
        if version != IDX_VERSION {
            return Err(RetrievalError::InvalidFile(format!("unsupported index version {version}")));
        }
        let dim = read_u32(r).map_err(bad)? as usize;
        let mut flag = [0u8];
        r.read_exact(&mut flag).map_err(bad)?;
        let ivf = match flag[0] {
            0 => None,
            1 => {
                let probes = read_u32(r).map_err(bad)? as usize;
                let k = read_u32(r).map_err(bad)? as usize;
                let mut centroids = Vec::with_capacity(k.min(1 << 16));
                for _ in 0..k {
                    centroids.push(read_f32s(r, dim).map_err(bad)?);
                }
                let mut lists = Vec::with_capacity(k.min(1 << 16));
                for _ in 0..k {
                    let n = read_u32(r).map_err(bad)? as usize;
                    let mut l = Vec::with_capacity(n.min(1 << 20));
                    for _ in 0..n {
                        l.push(read_u32(r).map_err(bad)?);
                    }
                    lists.push(l);
                }
                Some(Ivf { probes, centroids, lists })
            }
            f => return Err(RetrievalError::InvalidFile(format!("unknown index mode {f}"))),
        };
        let entries = read_embeddings(r)?;
        if entries.iter().any(|e| e.vector.len() != dim) {
            return Err(RetrievalError::InvalidFile("entry width differs from index width".into()));
        }
        if let Some(ivf) = &ivf {
            if ivf.lists.iter().flatten().any(|&i| i as usize >= entries.len()) {
                return Err(RetrievalError::InvalidFile("inverted list points past the entries".into()));
            }
        }
        Ok(Self { entries, dim, ivf })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        Ok(write_atomic(path, &self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
