//! Chunk alignment between versions of the same work.
//!
//! Two versions are cut into equally spaced chunks; every chunk pair whose
//! embeddings are more similar than a threshold is a matching pair with
//! offset `delta = p2 - p1`. The most frequent offset is taken as the global
//! alignment of the two versions and the pairs carrying it are the aligned
//! chunks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::encoder::EmbeddingSource;
use crate::nn::Rng;

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("cannot align an empty chunk list")]
    EmptyInput,
    #[error("no matching pairs to vote on")]
    NoPairs,
    #[error("invalid alignment table line {line}: {reason}")]
    InvalidTable { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Chunking and matching threshold of the alignment stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub threshold: f64,
    pub chunk_s: f64,
    pub hop_s: f64,
    pub embedding: EmbeddingSource,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            chunk_s: 15.0,
            hop_s: 7.5,
            embedding: EmbeddingSource::default(),
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.chunk_s > 0.0 && self.hop_s > 0.0 && self.hop_s <= self.chunk_s) {
            return Err(format!("alignment chunking {} s / {} s invalid", self.chunk_s, self.hop_s));
        }
        if !self.threshold.is_finite() {
            return Err("alignment threshold must be finite".into());
        }
        Ok(())
    }
}

/// Embedding of one chunk of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkEmbedding {
    pub track_id: String,
    pub work_id: String,
    /// 1-based position within the track.
    pub chunk_index: u32,
    pub start_s: f64,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingPair {
    pub p1: u32,
    pub p2: u32,
    pub delta: i64,
    pub similarity: f64,
}

impl MatchingPair {
    pub fn new(p1: u32, p2: u32, similarity: f64) -> Self {
        Self {
            p1,
            p2,
            delta: p2 as i64 - p1 as i64,
            similarity,
        }
    }
}

/// One aligned chunk pair; `delta` is the winning offset of its track pair
/// and `n_support_pairs` the number of matching pairs that voted for it.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub track_a: String,
    pub track_b: String,
    pub start_a_s: f64,
    pub start_b_s: f64,
    pub delta: i64,
    pub n_support_pairs: usize,
}

impl AlignedPair {
    /// 1-based chunk indices implied by the start times.
    pub fn chunk_indices(&self, hop_s: f64) -> (u32, u32) {
        (
            (self.start_a_s / hop_s).round() as u32 + 1,
            (self.start_b_s / hop_s).round() as u32 + 1,
        )
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Every `(i, j)` with `cos(a_i, b_j) > threshold`, in `(i, j)` order.
pub fn find_matching_pairs(a: &[ChunkEmbedding], b: &[ChunkEmbedding], threshold: f64) -> Result<Vec<MatchingPair>, AlignError> {
    if a.is_empty() || b.is_empty() {
        return Err(AlignError::EmptyInput);
    }
    let mut out = Vec::new();
    for x in a {
        for y in b {
            let sim = cosine(&x.vector, &y.vector);
            if sim > threshold {
                out.push(MatchingPair::new(x.chunk_index, y.chunk_index, sim));
            }
        }
    }
    Ok(out)
}

/// Most frequent offset and its count. Ties go to the smallest `|delta|`,
/// then the smallest `delta`.
pub fn mode_offset_with_count(pairs: &[MatchingPair]) -> Result<(i64, usize), AlignError> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for p in pairs {
        *counts.entry(p.delta).or_default() += 1;
    }
    counts
        .into_iter()
        .min_by_key(|&(d, n)| (std::cmp::Reverse(n), d.abs(), d))
        .ok_or(AlignError::NoPairs)
}

pub fn mode_offset(pairs: &[MatchingPair]) -> Result<i64, AlignError> {
    Ok(mode_offset_with_count(pairs)?.0)
}

/// The pairs whose offset equals `delta`, with chunk start times
/// `(index - 1) * hop_s`.
pub fn select_aligned(pairs: &[MatchingPair], delta: i64, track_a: &str, track_b: &str, hop_s: f64) -> Vec<AlignedPair> {
    let selected: Vec<&MatchingPair> = pairs.iter().filter(|p| p.delta == delta).collect();
    let n = selected.len();
    selected
        .into_iter()
        .map(|p| AlignedPair {
            track_a: track_a.to_string(),
            track_b: track_b.to_string(),
            start_a_s: (p.p1 as f64 - 1.0) * hop_s,
            start_b_s: (p.p2 as f64 - 1.0) * hop_s,
            delta,
            n_support_pairs: n,
        })
        .collect()
}

/// Offset decided for one track pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOffset {
    pub track_a: String,
    pub track_b: String,
    pub delta: i64,
    pub n_support_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignmentTable {
    pub rows: Vec<AlignedPair>,
    /// One entry per aligned track pair.
    pub offsets: Vec<PairOffset>,
    /// Same-work track pairs without a single matching pair.
    pub skipped: Vec<(String, String)>,
}

/// Aligns every unordered pair of tracks sharing a work. Tracks keep their
/// first-appearance order; within a track chunks are sorted by index.
pub fn build_alignment_table(embeddings: &[ChunkEmbedding], threshold: f64, hop_s: f64) -> AlignmentTable {
    let mut tracks: IndexMap<&str, Vec<&ChunkEmbedding>> = IndexMap::new();
    for e in embeddings {
        tracks.entry(e.track_id.as_str()).or_default().push(e);
    }
    let mut works: IndexMap<&str, Vec<&str>> = IndexMap::new();
    for (t, chunks) in tracks.iter_mut() {
        chunks.sort_by_key(|c| c.chunk_index);
        works.entry(chunks[0].work_id.as_str()).or_default().push(t);
    }
    let mut table = AlignmentTable::default();
    for members in works.values() {
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                let (ta, tb) = (members[i], members[j]);
                let a: Vec<ChunkEmbedding> = tracks[ta].iter().map(|c| (*c).clone()).collect();
                let b: Vec<ChunkEmbedding> = tracks[tb].iter().map(|c| (*c).clone()).collect();
                let pairs = find_matching_pairs(&a, &b, threshold).unwrap_or_default();
                match mode_offset_with_count(&pairs) {
                    Ok((delta, n)) => {
                        table.rows.extend(select_aligned(&pairs, delta, ta, tb, hop_s));
                        table.offsets.push(PairOffset {
                            track_a: ta.to_string(),
                            track_b: tb.to_string(),
                            delta,
                            n_support_pairs: n,
                        });
                    }
                    Err(_) => {
                        log::info!("no matching chunks between {ta} and {tb}; pair skipped");
                        table.skipped.push((ta.to_string(), tb.to_string()));
                    }
                }
            }
        }
    }
    table
}

impl AlignmentTable {
    /// Tab-separated rows: track_a, track_b, start_a_s, start_b_s, delta,
    /// n_support_pairs.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# track_a\ttrack_b\tstart_a_s\tstart_b_s\tdelta\tn_support_pairs\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.track_a, r.track_b, r.start_a_s, r.start_b_s, r.delta, r.n_support_pairs
            );
        }
        s
    }

    /// Parses rows; per-pair offsets are rebuilt from them.
    pub fn parse(text: &str) -> Result<Self, AlignError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| AlignError::InvalidTable {
                line: i + 1,
                reason: reason.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            rows.push(AlignedPair {
                track_a: f[0].to_string(),
                track_b: f[1].to_string(),
                start_a_s: f[2].parse().map_err(|_| bad("bad start_a_s"))?,
                start_b_s: f[3].parse().map_err(|_| bad("bad start_b_s"))?,
                delta: f[4].parse().map_err(|_| bad("bad delta"))?,
                n_support_pairs: f[5].parse().map_err(|_| bad("bad n_support_pairs"))?,
            });
        }
        let mut offsets: Vec<PairOffset> = Vec::new();
        for r in &rows {
            if !offsets.iter().any(|o| o.track_a == r.track_a && o.track_b == r.track_b) {
                offsets.push(PairOffset {
                    track_a: r.track_a.clone(),
                    track_b: r.track_b.clone(),
                    delta: r.delta,
                    n_support_pairs: r.n_support_pairs,
                });
            }
        }
        Ok(Self {
            rows,
            offsets,
            skipped: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AlignError> {
        Ok(write_atomic(path, self.to_text().as_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, AlignError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// A time window of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub track_id: String,
    pub start_s: f64,
    pub length_s: f64,
}

/// Extends an aligned pair to `length_s` from both aligned starts, clamped
/// so that neither crop runs past its track's end.
pub fn extend_with_length(pair: &AlignedPair, length_s: f64, duration_a_s: f64, duration_b_s: f64) -> [Crop; 2] {
    let avail = (duration_a_s - pair.start_a_s).min(duration_b_s - pair.start_b_s).max(0.0);
    let len = length_s.min(avail);
    [
        Crop {
            track_id: pair.track_a.clone(),
            start_s: pair.start_a_s,
            length_s: len,
        },
        Crop {
            track_id: pair.track_b.clone(),
            start_s: pair.start_b_s,
            length_s: len,
        },
    ]
}

/// [`extend_with_length`] with the length drawn uniformly from
/// `[min_s, max_s]`.
pub fn extend_aligned_chunk(
    pair: &AlignedPair,
    min_s: f64,
    max_s: f64,
    duration_a_s: f64,
    duration_b_s: f64,
    rng: &mut Rng,
) -> [Crop; 2] {
    let len = if max_s > min_s { rng.gen_range(min_s..=max_s) } else { min_s };
    extend_with_length(pair, len, duration_a_s, duration_b_s)
}
