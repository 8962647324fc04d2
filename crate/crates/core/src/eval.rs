//! Ranking metrics: mean average precision, mean rank of the first correct
//! result (MR1) and hit rate.
//!
//! Relevance is "same work, different track". Queries without any relevant
//! gallery track are excluded from every metric and counted separately.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::binio::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("query has no relevant items")]
    NoRelevant,
    #[error("no ground-truth work for track {0}")]
    MissingGroundTruth(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `(1 / |relevant|) * sum over relevant hits at rank r of hits_so_far / r`.
pub fn average_precision<S: AsRef<str>>(ranking: &[S], relevant: &HashSet<String>) -> Result<f64, EvalError> {
    if relevant.is_empty() {
        return Err(EvalError::NoRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, item) in ranking.iter().enumerate() {
        if relevant.contains(item.as_ref()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// Ranked gallery tracks for one query track.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    pub query_track: String,
    pub ranking: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRow {
    pub track_id: String,
    pub average_precision: f64,
    /// 1-based rank of the first relevant track; `None` if never retrieved.
    pub first_rank: Option<usize>,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub mr1: f64,
    pub hit_rate: f64,
    pub per_query: Vec<QueryRow>,
    /// Queries without a relevant gallery track.
    pub excluded: Vec<String>,
}

/// Scores every query; `gallery` lists the searchable track ids and
/// `work_of` maps every track (query or gallery) to its work.
///
/// A query whose relevant tracks never appear in its ranking gets rank
/// `len(ranking) + 1` for MR1.
pub fn evaluate(queries: &[QueryRanking], gallery: &[String], work_of: &HashMap<String, String>) -> Result<EvalReport, EvalError> {
    let work = |t: &str| work_of.get(t).ok_or_else(|| EvalError::MissingGroundTruth(t.to_string()));
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    let mut ranks = Vec::new();
    for q in queries {
        let qw = work(&q.query_track)?;
        let mut relevant = HashSet::new();
        for g in gallery {
            if g != &q.query_track && work(g)? == qw {
                relevant.insert(g.clone());
            }
        }
        if relevant.is_empty() {
            excluded.push(q.query_track.clone());
            continue;
        }
        let ranking: Vec<&String> = q.ranking.iter().filter(|t| **t != q.query_track).collect();
        let ap = average_precision(&ranking, &relevant)?;
        let first_rank = ranking.iter().position(|t| relevant.contains(*t)).map(|p| p + 1);
        ranks.push(first_rank.unwrap_or(ranking.len() + 1) as f64);
        per_query.push(QueryRow {
            track_id: q.query_track.clone(),
            average_precision: ap,
            first_rank,
            hit: first_rank == Some(1),
        });
    }
    let n = per_query.len();
    let mean = |f: &dyn Fn(&QueryRow) -> f64| if n == 0 { 0.0 } else { per_query.iter().map(f).sum::<f64>() / n as f64 };
    let map = mean(&|r| r.average_precision);
    let hit_rate = mean(&|r| if r.hit { 1.0 } else { 0.0 });
    let mr1 = if n == 0 { 0.0 } else { ranks.iter().sum::<f64>() / n as f64 };
    Ok(EvalReport {
        map,
        mr1,
        hit_rate,
        per_query,
        excluded,
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "map\t{:.6}", self.map);
        let _ = writeln!(s, "mr1\t{:.6}", self.mr1);
        let _ = writeln!(s, "hit_rate\t{:.6}", self.hit_rate);
        let _ = writeln!(s, "queries\t{}", self.per_query.len());
        let _ = writeln!(s, "excluded\t{}", self.excluded.len());
        let _ = writeln!(s, "\n# track_id\tap\tfirst_rank\thit");
        for r in &self.per_query {
            let rank = r.first_rank.map_or_else(|| "-".to_string(), |v| v.to_string());
            let _ = writeln!(s, "{}\t{:.6}\t{}\t{}", r.track_id, r.average_precision, rank, r.hit as u8);
        }
        for t in &self.excluded {
            let _ = writeln!(s, "# excluded\t{t}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        Ok(write_atomic(path, self.to_text().as_bytes())?)
    }
}
