//! Corpus manifest: one tab-separated record per line.
//!
//! ```text
//! # track_id  work_id  path  [duration_s]  [split]  [offset_s]
//! w00_v0      w00      audio/w00_v0.wav  42.5  train  7.5
//! ```
//!
//! Empty optional fields are allowed. `offset_s` is the planted prelude
//! length of synthetic tracks (ground truth for alignment). Relative paths
//! resolve against the manifest's directory. Lines starting with `#` are
//! comments.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::AudioError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub track_id: String,
    pub work_id: String,
    pub path: PathBuf,
    pub duration_s: Option<f64>,
    pub split: Split,
    pub offset_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

fn opt_f64(field: Option<&str>, line: usize, what: &str) -> Result<Option<f64>, AudioError> {
    match field.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => s.parse::<f64>().map(Some).map_err(|_| AudioError::InvalidManifest {
            line,
            reason: format!("bad {what} {s:?}"),
        }),
    }
}

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, AudioError> {
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() < 3 {
                return Err(AudioError::InvalidManifest {
                    line,
                    reason: "expected at least track_id, work_id, path".into(),
                });
            }
            let (track_id, work_id, path) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
            if track_id.is_empty() || work_id.is_empty() || path.is_empty() {
                return Err(AudioError::InvalidManifest {
                    line,
                    reason: "empty required field".into(),
                });
            }
            let split = match fields.get(4).map(|s| s.trim()) {
                None | Some("") => Split::Train,
                Some(s) => s.parse().map_err(|reason| AudioError::InvalidManifest { line, reason })?,
            };
            let p = PathBuf::from(path);
            records.push(ManifestRecord {
                track_id: track_id.to_string(),
                work_id: work_id.to_string(),
                path: if p.is_absolute() { p } else { base_dir.join(p) },
                duration_s: opt_f64(fields.get(3).copied(), line, "duration")?,
                split,
                offset_s: opt_f64(fields.get(5).copied(), line, "offset")?,
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &records {
            if !seen.insert(r.track_id.as_str()) {
                return Err(AudioError::InvalidManifest {
                    line: 0,
                    reason: format!("duplicate track_id {}", r.track_id),
                });
            }
        }
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self, AudioError> {
        if !path.exists() {
            return Err(AudioError::FileNotFound(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Serializes with paths relative to `base_dir` where possible.
    pub fn to_text(&self, base_dir: &Path) -> String {
        let mut s = String::from("# track_id\twork_id\tpath\tduration_s\tsplit\toffset_s\n");
        let num = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.records {
            let p = r.path.strip_prefix(base_dir).unwrap_or(&r.path);
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.track_id,
                r.work_id,
                p.display(),
                num(r.duration_s),
                r.split,
                num(r.offset_s)
            ));
        }
        s
    }

    pub fn get(&self, track_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.track_id == track_id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Work labels in first-appearance order.
    pub fn works(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.work_id) {
                out.push(r.work_id.clone());
            }
        }
        out
    }
}
