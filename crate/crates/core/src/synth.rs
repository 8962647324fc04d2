//! Synthetic cover corpus for desk-scale experiments.
//!
//! Every work is a random melody over a bass line. Each version replays it
//! with its own tempo, transposition, timbre and a few substituted notes,
//! and may start with a junk prelude of unrelated material whose length is
//! recorded as the version's `offset_s`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioClip, AudioError, Manifest, ManifestRecord, Split};
use crate::nn::Rng;

const TABLE_LEN: usize = 2048;
const HARMONICS: usize = 6;
const ATTACK_S: f64 = 0.01;
const RELEASE_S: f64 = 0.04;
const PEAK: f32 = 0.9;
/// Major pentatonic degrees in semitones.
const SCALE: [i32; 5] = [0, 2, 4, 7, 9];
const NOTE_LENGTHS_S: [f64; 5] = [0.25, 0.5, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_works: usize,
    pub n_versions: usize,
    /// Melody length at the original tempo.
    pub duration_s: f64,
    pub junk_prelude_s_max: f64,
    /// Prelude lengths are multiples of this.
    pub prelude_step_s: f64,
    /// Version tempo factors are drawn from this range.
    pub tempo_range: [f64; 2],
    pub transpose_max: i32,
    /// Probability that a melody note is replaced in a version.
    pub substitution_prob: f64,
    /// Versions per work (taken from the end) assigned to the test split.
    pub test_versions: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_works: 8,
            n_versions: 4,
            duration_s: 45.0,
            junk_prelude_s_max: 0.0,
            prelude_step_s: 7.5,
            tempo_range: [0.97, 1.03],
            transpose_max: 2,
            substitution_prob: 0.1,
            test_versions: 0,
            sample_rate: 16000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_works < 2 || self.n_versions < 2 {
            return Err("synthetic corpus needs at least 2 works and 2 versions".into());
        }
        if self.test_versions >= self.n_versions {
            return Err("every work needs at least one training version".into());
        }
        if self.duration_s <= 0.0 || self.junk_prelude_s_max < 0.0 || self.prelude_step_s <= 0.0 {
            return Err("durations must be positive".into());
        }
        if !(self.tempo_range[0] > 0.0 && self.tempo_range[0] <= self.tempo_range[1]) {
            return Err(format!("bad tempo range {:?}", self.tempo_range));
        }
        if !(0.0..=1.0).contains(&self.substitution_prob) {
            return Err("substitution_prob outside [0, 1]".into());
        }
        if self.sample_rate < 8000 {
            return Err("sample_rate below 8 kHz".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Note {
    midi: i32,
    start_s: f64,
    len_s: f64,
    gain: f32,
}

struct Work {
    melody: Vec<Note>,
    bass: Vec<Note>,
}

fn midi_hz(m: f64) -> f64 {
    440.0 * 2f64.powf((m - 69.0) / 12.0)
}

fn scale_pitch(degree: i32, base: i32) -> i32 {
    let oct = degree.div_euclid(SCALE.len() as i32);
    let d = degree.rem_euclid(SCALE.len() as i32) as usize;
    base + 12 * oct + SCALE[d]
}

fn compose(duration_s: f64, rng: &mut Rng) -> Work {
    let base = rng.gen_range(57..=62);
    let mut melody = Vec::new();
    let mut degree: i32 = rng.gen_range(0..5);
    let mut t = 0.0;
    while t < duration_s {
        let len = *NOTE_LENGTHS_S.choose(rng).expect("non-empty");
        degree = (degree + rng.gen_range(-2..=2)).clamp(-2, 9);
        melody.push(Note {
            midi: scale_pitch(degree, base),
            start_s: t,
            len_s: len.min(duration_s - t),
            gain: 1.0,
        });
        t += len;
    }
    let mut bass = Vec::new();
    let mut t = 0.0;
    while t < duration_s {
        bass.push(Note {
            midi: base - 24 + SCALE[rng.gen_range(0..SCALE.len())],
            start_s: t,
            len_s: 2.0f64.min(duration_s - t),
            gain: 0.5,
        });
        t += 2.0;
    }
    Work { melody, bass }
}

/// One period of a harmonic mix, peak-normalized.
fn wavetable(amps: &[f64]) -> Vec<f32> {
    let mut table: Vec<f64> = (0..TABLE_LEN)
        .map(|i| {
            let ph = std::f64::consts::TAU * i as f64 / TABLE_LEN as f64;
            amps.iter().enumerate().map(|(h, a)| a * (ph * (h + 1) as f64).sin()).sum()
        })
        .collect();
    let peak = table.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    table.iter_mut().for_each(|v| *v /= peak);
    table.into_iter().map(|v| v as f32).collect()
}

fn random_timbre(rng: &mut Rng) -> Vec<f64> {
    let decay = rng.gen_range(0.6..1.6);
    (0..HARMONICS).map(|h| rng.gen_range(0.5..1.0) / ((h + 1) as f64).powf(decay)).collect()
}

/// Adds `notes` to `out`, starting `offset_s` into it, transposed by
/// `transpose` semitones.
fn render(out: &mut [f32], sr: u32, notes: &[Note], table: &[f32], offset_s: f64, transpose: i32) {
    let sr_f = sr as f64;
    let attack = (ATTACK_S * sr_f) as usize;
    let release = (RELEASE_S * sr_f) as usize;
    for n in notes {
        let start = ((offset_s + n.start_s) * sr_f).round() as usize;
        let len = (n.len_s * sr_f).round() as usize;
        let hz = midi_hz((n.midi + transpose) as f64);
        let step = hz * TABLE_LEN as f64 / sr_f;
        let mut phase = 0.0f64;
        for i in 0..len {
            let Some(slot) = out.get_mut(start + i) else {
                break;
            };
            let env = if i < attack {
                i as f32 / attack as f32
            } else if len - i < release {
                (len - i) as f32 / release as f32
            } else {
                1.0
            };
            *slot += n.gain * env * table[phase as usize];
            phase += step;
            if phase >= TABLE_LEN as f64 {
                phase -= TABLE_LEN as f64;
            }
        }
    }
}

/// Unrelated material: fast chromatic notes over a wide range, each with a
/// fresh timbre, plus low-level noise.
fn junk(len_s: f64, sr: u32, rng: &mut Rng) -> Vec<f32> {
    let n = (len_s * sr as f64).round() as usize;
    let mut out = vec![0.0f32; n];
    let mut t = 0.0;
    while t < len_s {
        let len = rng.gen_range(0.1..0.4f64).min(len_s - t);
        let note = Note {
            midi: rng.gen_range(40..=88),
            start_s: t,
            len_s: len,
            gain: rng.gen_range(0.4..1.0),
        };
        let table = wavetable(&random_timbre(rng));
        render(&mut out, sr, &[note], &table, 0.0, 0);
        t += len;
    }
    for v in out.iter_mut() {
        *v += rng.gen_range(-0.05..0.05f32);
    }
    out
}

/// A generated track with its manifest record (path relative to the corpus
/// directory).
#[derive(Debug, Clone)]
pub struct SynthTrack {
    pub record: ManifestRecord,
    pub clip: AudioClip,
}

/// Generates the corpus in memory. Tracks are ordered by work, then version.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthTrack>, String> {
    cfg.validate()?;
    let mut master = Rng::seed_from_u64(cfg.seed);
    let steps = (cfg.junk_prelude_s_max / cfg.prelude_step_s + 1e-9).floor() as usize;
    let sr = cfg.sample_rate;
    let mut tracks = Vec::new();
    for w in 0..cfg.n_works {
        let mut wrng = Rng::seed_from_u64(master.gen());
        let work = compose(cfg.duration_s, &mut wrng);
        let work_id = format!("w{w:03}");
        for v in 0..cfg.n_versions {
            let mut rng = Rng::seed_from_u64(wrng.gen());
            let tempo = if cfg.tempo_range[1] > cfg.tempo_range[0] {
                rng.gen_range(cfg.tempo_range[0]..=cfg.tempo_range[1])
            } else {
                cfg.tempo_range[0]
            };
            let transpose = if cfg.transpose_max > 0 {
                rng.gen_range(-cfg.transpose_max..=cfg.transpose_max)
            } else {
                0
            };
            let prelude_s = rng.gen_range(0..=steps) as f64 * cfg.prelude_step_s;
            let melody: Vec<Note> = work
                .melody
                .iter()
                .map(|n| {
                    let midi = if rng.gen_bool(cfg.substitution_prob) {
                        n.midi + [-2, -1, 1, 2][rng.gen_range(0..4)]
                    } else {
                        n.midi
                    };
                    Note {
                        midi,
                        start_s: n.start_s / tempo,
                        len_s: n.len_s / tempo,
                        gain: n.gain,
                    }
                })
                .collect();
            let bass: Vec<Note> = work
                .bass
                .iter()
                .map(|n| Note {
                    start_s: n.start_s / tempo,
                    len_s: n.len_s / tempo,
                    ..*n
                })
                .collect();
            let body_s = cfg.duration_s / tempo;
            let total = ((prelude_s + body_s) * sr as f64).round() as usize;
            let mut samples = vec![0.0f32; total];
            let pre = junk(prelude_s, sr, &mut rng);
            samples[..pre.len()].copy_from_slice(&pre);
            let lead = wavetable(&random_timbre(&mut rng));
            let low = wavetable(&random_timbre(&mut rng));
            render(&mut samples, sr, &melody, &lead, prelude_s, transpose);
            render(&mut samples, sr, &bass, &low, prelude_s, transpose);
            for s in samples.iter_mut().skip(pre.len()) {
                *s += rng.gen_range(-0.01..0.01f32);
            }
            let peak = samples.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
            samples.iter_mut().for_each(|s| *s *= PEAK / peak);

            let track_id = format!("{work_id}_v{v}");
            let clip = AudioClip::new(track_id.clone(), samples, sr);
            let split = if v >= cfg.n_versions - cfg.test_versions {
                Split::Test
            } else {
                Split::Train
            };
            tracks.push(SynthTrack {
                record: ManifestRecord {
                    track_id: track_id.clone(),
                    work_id: work_id.clone(),
                    path: format!("audio/{track_id}.wav").into(),
                    duration_s: Some(clip.duration_s()),
                    split,
                    offset_s: Some(prelude_s),
                },
                clip,
            });
        }
    }
    Ok(tracks)
}

/// Writes the manifest to `manifest_path` and the audio to `audio/*.wav`
/// beside it; returns the manifest with absolute paths.
pub fn write_corpus(cfg: &SynthConfig, manifest_path: &Path) -> Result<Manifest, AudioError> {
    let tracks = generate(cfg).map_err(|reason| AudioError::InvalidManifest { line: 0, reason })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir.join("audio"))?;
    let mut manifest = Manifest::default();
    for t in tracks {
        let mut rec = t.record;
        rec.path = dir.join(&rec.path);
        write_wav(&rec.path, &t.clip)?;
        manifest.records.push(rec);
    }
    crate::binio::write_atomic(manifest_path, manifest.to_text(dir).as_bytes())?;
    Ok(manifest)
}

/// Ground-truth chunk offset between two synthetic versions.
pub fn planted_delta(offset_a_s: f64, offset_b_s: f64, hop_s: f64) -> i64 {
    ((offset_b_s - offset_a_s) / hop_s).round() as i64
}
