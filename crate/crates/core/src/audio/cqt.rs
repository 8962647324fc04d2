//! Constant-Q transform.
//!
//! Bin `k` has centre frequency `f_min * 2^(k / bins_per_octave)` and a Hann
//! window of `max(min_window, Q * sr / f_k)` samples, `Q = 1 / (2^(1/b) - 1)`.
//! Each bin is evaluated in the spectral domain (sparse kernel times frame
//! spectrum) on the most decimated copy of the signal whose Nyquist rate
//! still clears the bin comfortably, so every FFT stays small.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::binio::*;

use super::{resample, AudioClip, AudioError};

/// Value of a bin with zero magnitude after log compression.
pub const LOG_FLOOR: f32 = 0.0;

const MAGIC: &[u8; 4] = b"CQTF";
const VERSION: u32 = 1;
const DECIMATIONS: [usize; 5] = [16, 8, 4, 2, 1];
/// A bin may use decimation `d` only if `f_k <= NYQUIST_MARGIN * sr / d`.
const NYQUIST_MARGIN: f64 = 0.35;
/// Spectral-kernel entries below this fraction of the bin's peak are dropped.
const KERNEL_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CqtConfig {
    pub sample_rate: u32,
    pub hop_s: f64,
    pub min_window_s: f64,
    pub bins: usize,
    pub bins_per_octave: usize,
    pub f_min: f64,
    pub log_eps: f64,
}

impl Default for CqtConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            hop_s: 0.04,
            min_window_s: 0.08,
            bins: 96,
            bins_per_octave: 12,
            f_min: 32.70,
            log_eps: 1e-5,
        }
    }
}

impl CqtConfig {
    pub fn hop_samples(&self) -> usize {
        (self.hop_s * self.sample_rate as f64).round() as usize
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_samples() as f64
    }

    pub fn q_factor(&self) -> f64 {
        1.0 / (2f64.powf(1.0 / self.bins_per_octave as f64) - 1.0)
    }

    pub fn center_frequency(&self, bin: usize) -> f64 {
        self.f_min * 2f64.powf(bin as f64 / self.bins_per_octave as f64)
    }

    /// Analysis window length of `bin` in samples at the full rate.
    pub fn window_len(&self, bin: usize) -> usize {
        let sr = self.sample_rate as f64;
        let q_len = (self.q_factor() * sr / self.center_frequency(bin)).ceil() as usize;
        q_len.max((self.min_window_s * sr).round() as usize)
    }

    pub fn longest_window(&self) -> usize {
        (0..self.bins).map(|k| self.window_len(k)).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.bins == 0 || self.bins_per_octave == 0 {
            return Err("cqt bins must be positive".into());
        }
        if self.hop_samples() == 0 {
            return Err("cqt hop is shorter than one sample".into());
        }
        let top = self.center_frequency(self.bins - 1);
        if top >= self.sample_rate as f64 / 2.0 {
            return Err(format!("top cqt bin {top:.1} Hz exceeds Nyquist"));
        }
        if self.log_eps <= 0.0 {
            return Err("log_eps must be positive".into());
        }
        Ok(())
    }
}

/// `T x F` log-magnitude constant-Q frames of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct CqtFeature {
    /// Row-major `n_frames x bins`.
    pub frames: Vec<f32>,
    pub n_frames: usize,
    pub bins: usize,
    pub frame_rate: f32,
    pub bins_per_octave: usize,
    pub f_min: f32,
    pub track_id: String,
}

impl CqtFeature {
    pub fn duration_s(&self) -> f64 {
        self.n_frames as f64 / self.frame_rate as f64
    }

    pub fn get(&self, t: usize, f: usize) -> f32 {
        self.frames[t * self.bins + f]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.bins..(t + 1) * self.bins]
    }

    /// Frames `[start, start + len)`, zero-padded (log floor) past the end.
    pub fn slice_frames(&self, start: usize, len: usize) -> Vec<f32> {
        let mut out = vec![LOG_FLOOR; len * self.bins];
        if start < self.n_frames {
            let avail = (self.n_frames - start).min(len);
            out[..avail * self.bins].copy_from_slice(&self.frames[start * self.bins..(start + avail) * self.bins]);
        }
        out
    }

    /// Time-averaged spectrum.
    pub fn mean_spectrum(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.bins];
        for t in 0..self.n_frames {
            for (a, &v) in acc.iter_mut().zip(self.frame(t)) {
                *a += v as f64;
            }
        }
        acc.iter().map(|v| (v / self.n_frames.max(1) as f64) as f32).collect()
    }

    /// "CQTF1": magic, u32 version, u32 T, u32 F, f32 frame rate, T*F f32.
    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        write_u32(w, self.n_frames as u32)?;
        write_u32(w, self.bins as u32)?;
        write_f32(w, self.frame_rate)?;
        write_f32s(w, &self.frames)
    }

    /// Reads "CQTF1". The format carries no pitch geometry, so
    /// `bins_per_octave` and `f_min` take the default configuration's values.
    pub fn read<R: Read>(r: &mut R, track_id: &str) -> Result<Self, AudioError> {
        let bad = |e: std::io::Error| AudioError::InvalidFeature(e.to_string());
        expect_magic(r, MAGIC).map_err(bad)?;
        let version = read_u32(r).map_err(bad)?;
        if version != VERSION {
            return Err(AudioError::InvalidFeature(format!("unsupported version {version}")));
        }
        let n_frames = read_u32(r).map_err(bad)? as usize;
        let bins = read_u32(r).map_err(bad)? as usize;
        let frame_rate = read_f32(r).map_err(bad)?;
        if n_frames.saturating_mul(bins) > 1 << 30 {
            return Err(AudioError::InvalidFeature("feature too large".into()));
        }
        let frames = read_f32s(r, n_frames * bins).map_err(bad)?;
        let d = CqtConfig::default();
        Ok(Self {
            frames,
            n_frames,
            bins,
            frame_rate,
            bins_per_octave: d.bins_per_octave,
            f_min: d.f_min as f32,
            track_id: track_id.to_string(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(20 + self.frames.len() * 4);
        self.write(&mut b).expect("writing to memory");
        b
    }

    pub fn save(&self, path: &Path) -> Result<(), AudioError> {
        Ok(write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path, track_id: &str) -> Result<Self, AudioError> {
        let bytes = std::fs::read(path)?;
        Self::read(&mut bytes.as_slice(), track_id)
    }
}

struct KernelGroup {
    decimation: usize,
    fft_len: usize,
    fft: Arc<dyn Fft<f64>>,
    /// (bin, sparse conjugated spectral kernel scaled by 1 / fft_len)
    kernels: Vec<(usize, Vec<(usize, Complex<f64>)>)>,
}

/// Precomputed spectral kernels for one [`CqtConfig`].
pub struct CqtPlan {
    cfg: CqtConfig,
    groups: Vec<KernelGroup>,
}

impl CqtPlan {
    pub fn new(cfg: &CqtConfig) -> Self {
        let sr = cfg.sample_rate as f64;
        let hop = cfg.hop_samples();
        let mut planner = FftPlanner::<f64>::new();
        let mut by_decimation: Vec<(usize, Vec<usize>)> = Vec::new();
        for k in 0..cfg.bins {
            let f = cfg.center_frequency(k);
            let d = DECIMATIONS
                .iter()
                .copied()
                .find(|&d| hop % d == 0 && f <= NYQUIST_MARGIN * sr / d as f64 && cfg.window_len(k) >= 4 * d)
                .unwrap_or(1);
            match by_decimation.iter_mut().find(|(dd, _)| *dd == d) {
                Some((_, bins)) => bins.push(k),
                None => by_decimation.push((d, vec![k])),
            }
        }
        let groups = by_decimation
            .into_iter()
            .map(|(d, bins)| {
                let rate = sr / d as f64;
                let max_len = bins.iter().map(|&k| cfg.window_len(k).div_ceil(d)).max().unwrap_or(1);
                let fft_len = (max_len + 1).next_power_of_two();
                let fft = planner.plan_fft_forward(fft_len);
                let kernels = bins
                    .into_iter()
                    .map(|k| (k, spectral_kernel(cfg, k, d, rate, fft_len, fft.as_ref())))
                    .collect();
                KernelGroup {
                    decimation: d,
                    fft_len,
                    fft,
                    kernels,
                }
            })
            .collect();
        Self { cfg: cfg.clone(), groups }
    }

    pub fn config(&self) -> &CqtConfig {
        &self.cfg
    }

    /// Complex-magnitude CQT of `samples` (already at the configured rate):
    /// frame `t` is centred on sample `t * hop`, `T = len / hop`.
    pub fn magnitudes(&self, samples: &[f32]) -> (usize, Vec<f64>) {
        let hop = self.cfg.hop_samples();
        let n_frames = samples.len() / hop;
        let bins = self.cfg.bins;
        let mut out = vec![0.0; n_frames * bins];
        let sr = self.cfg.sample_rate;
        for g in &self.groups {
            let signal: Vec<f32> = if g.decimation == 1 {
                samples.to_vec()
            } else {
                resample(samples, sr, sr / g.decimation as u32)
            };
            let ghop = hop / g.decimation;
            let half = g.fft_len / 2;
            let mut buf = vec![Complex::new(0.0, 0.0); g.fft_len];
            let mut scratch = vec![Complex::new(0.0, 0.0); g.fft.get_inplace_scratch_len()];
            for t in 0..n_frames {
                let center = t * ghop;
                for (i, b) in buf.iter_mut().enumerate() {
                    let idx = center as isize + i as isize - half as isize;
                    let v = if idx >= 0 && (idx as usize) < signal.len() {
                        signal[idx as usize] as f64
                    } else {
                        0.0
                    };
                    *b = Complex::new(v, 0.0);
                }
                g.fft.process_with_scratch(&mut buf, &mut scratch);
                for (k, kernel) in &g.kernels {
                    let mut acc = Complex::new(0.0, 0.0);
                    for &(j, c) in kernel {
                        acc += buf[j] * c;
                    }
                    out[t * bins + k] = acc.norm();
                }
            }
        }
        (n_frames, out)
    }
}

/// Spectral kernel of bin `k` at decimation `d`: FFT of the Hann-windowed
/// complex exponential centred in the frame, normalized so a unit sinusoid at
/// the bin frequency yields magnitude 1/2.
fn spectral_kernel(
    cfg: &CqtConfig,
    k: usize,
    d: usize,
    rate: f64,
    fft_len: usize,
    fft: &dyn Fft<f64>,
) -> Vec<(usize, Complex<f64>)> {
    let f = cfg.center_frequency(k);
    let n = cfg.window_len(k).div_ceil(d).max(2);
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    let wsum: f64 = window.iter().sum();
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let half = fft_len / 2;
    let start = half - n / 2;
    for (i, w) in window.iter().enumerate() {
        let offset = i as f64 - (n / 2) as f64;
        let phase = 2.0 * std::f64::consts::PI * f * offset / rate;
        buf[start + i] = Complex::new(phase.cos(), phase.sin()) * (w / wsum);
    }
    fft.process(&mut buf);
    let peak = buf.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let scale = 1.0 / fft_len as f64;
    buf.iter()
        .enumerate()
        .filter(|(_, c)| c.norm() >= KERNEL_THRESHOLD * peak)
        .map(|(j, c)| (j, c.conj() * scale))
        .collect()
}

/// Log-compressed constant-Q features: `ln(1 + |X| / eps)`, which is already
/// non-negative, so silence maps to [`LOG_FLOOR`].
pub fn compute_cqt(clip: &AudioClip, plan: &CqtPlan) -> Result<CqtFeature, AudioError> {
    let cfg = plan.config();
    let samples: Vec<f32> = if clip.sample_rate != cfg.sample_rate {
        resample(&clip.samples, clip.sample_rate, cfg.sample_rate)
    } else {
        clip.samples.clone()
    };
    let longest = cfg.longest_window();
    if samples.len() < longest {
        return Err(AudioError::TooShort {
            samples: samples.len(),
            window: longest,
        });
    }
    let (n_frames, mags) = plan.magnitudes(&samples);
    let eps = cfg.log_eps;
    let frames = mags
        .iter()
        .map(|&m| ((1.0 + m / eps).ln() as f32).max(LOG_FLOOR))
        .collect();
    Ok(CqtFeature {
        frames,
        n_frames,
        bins: cfg.bins,
        frame_rate: cfg.frame_rate() as f32,
        bins_per_octave: cfg.bins_per_octave,
        f_min: cfg.f_min as f32,
        track_id: clip.track_id.clone(),
    })
}

/// One chunk cut from a feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureChunk {
    pub start_s: f64,
    pub start_frame: usize,
    pub n_frames: usize,
    /// Row-major `n_frames x bins`.
    pub frames: Vec<f32>,
}

/// Cuts `feat` into chunks of `chunk_s` starting at `0, hop_s, 2*hop_s, ...`.
///
/// Chunking stops at the first chunk that reaches the end of the feature. A
/// final partial chunk is kept iff it spans at least half a chunk.
pub fn chunk_feature(feat: &CqtFeature, chunk_s: f64, hop_s: f64) -> Vec<FeatureChunk> {
    assert!(chunk_s > 0.0 && hop_s > 0.0 && hop_s <= chunk_s, "need 0 < hop <= chunk");
    let fr = feat.frame_rate as f64;
    let chunk = ((chunk_s * fr).round() as usize).max(1);
    let t = feat.n_frames;
    let mut out = Vec::new();
    for k in 0.. {
        let start_s = k as f64 * hop_s;
        let s = (start_s * fr).round() as usize;
        if s >= t {
            break;
        }
        let len = chunk.min(t - s);
        if 2 * len < chunk {
            break;
        }
        out.push(FeatureChunk {
            start_s,
            start_frame: s,
            n_frames: len,
            frames: feat.frames[s * feat.bins..(s + len) * feat.bins].to_vec(),
        });
        if s + chunk >= t {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(seconds: f64) -> CqtFeature {
        let n = (seconds * 25.0).round() as usize;
        CqtFeature {
            frames: (0..n * 4).map(|i| i as f32).collect(),
            n_frames: n,
            bins: 4,
            frame_rate: 25.0,
            bins_per_octave: 12,
            f_min: 32.7,
            track_id: "t".into(),
        }
    }

    #[test]
    fn default_geometry() {
        let c = CqtConfig::default();
        assert_eq!(c.hop_samples(), 640);
        assert_eq!(c.frame_rate(), 25.0);
        assert!(c.validate().is_ok());
        assert_eq!(c.window_len(95), 1280);
        assert!(c.window_len(0) > 8000);
    }

    #[test]
    fn chunk_starts_sixty_seconds() {
        let starts: Vec<f64> = chunk_feature(&feature(60.0), 15.0, 7.5).iter().map(|c| c.start_s).collect();
        assert_eq!(starts, vec![0.0, 7.5, 15.0, 22.5, 30.0, 37.5, 45.0]);
    }

    #[test]
    fn chunk_single_and_partial() {
        let c = chunk_feature(&feature(45.0), 45.0, 45.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].n_frames, 1125);
        let c = chunk_feature(&feature(10.0), 15.0, 7.5);
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].start_s, c[0].n_frames), (0.0, 250));
        assert!(chunk_feature(&feature(7.0), 15.0, 7.5).is_empty());
    }

    #[test]
    fn chunks_cover_every_frame() {
        for secs in [3.0, 7.5, 16.0, 33.3, 61.2] {
            let f = feature(secs);
            // a dropped tail can only be uncovered when hop > chunk / 2
            for (c, h) in [(15.0, 7.5), (4.0, 2.0), (5.0, 1.0)] {
                let chunks = chunk_feature(&f, c, h);
                if chunks.is_empty() {
                    assert!(f.duration_s() < c / 2.0);
                    continue;
                }
                let mut covered = vec![false; f.n_frames];
                for ch in &chunks {
                    covered[ch.start_frame..ch.start_frame + ch.n_frames].iter_mut().for_each(|v| *v = true);
                }
                assert!(covered.iter().all(|&v| v), "{secs} s, chunk {c}, hop {h}");
            }
        }
    }
}
