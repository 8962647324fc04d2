//! Audio ingestion, resampling, and constant-Q feature extraction.

mod cqt;
mod manifest;

use std::path::Path;

pub use cqt::{chunk_feature, compute_cqt, CqtConfig, CqtFeature, CqtPlan, FeatureChunk, LOG_FLOOR};
pub use manifest::{Manifest, ManifestRecord, Split};

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("audio file not found: {0}")]
    FileNotFound(String),
    #[error("cannot decode {path}: {reason}")]
    DecodeError { path: String, reason: String },
    #[error("audio has no samples: {0}")]
    EmptyAudio(String),
    #[error("clip of {samples} samples is shorter than the longest analysis window ({window})")]
    TooShort { samples: usize, window: usize },
    #[error("signal has zero power: {0}")]
    SilentSignal(String),
    #[error("invalid feature file: {0}")]
    InvalidFeature(String),
    #[error("invalid manifest line {line}: {reason}")]
    InvalidManifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub track_id: String,
}

impl AudioClip {
    pub fn new(track_id: impl Into<String>, samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            track_id: track_id.into(),
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Mean power (mean square) in f64.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    /// Scales down so that the peak is at most 1; quieter clips are untouched.
    pub fn normalize_peak(&mut self) {
        let peak = self.peak();
        if peak > 1.0 {
            let s = 1.0 / peak;
            self.samples.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Samples in `[start_s, start_s + len_s)`, zero-padded past the end.
    pub fn crop(&self, start_s: f64, len_s: f64) -> AudioClip {
        let sr = self.sample_rate as f64;
        let start = (start_s * sr).round().max(0.0) as usize;
        let n = (len_s * sr).round().max(0.0) as usize;
        let mut samples = vec![0.0; n];
        if start < self.samples.len() {
            let avail = (self.samples.len() - start).min(n);
            samples[..avail].copy_from_slice(&self.samples[start..start + avail]);
        }
        AudioClip::new(self.track_id.clone(), samples, self.sample_rate)
    }
}

/// Decodes a WAV file, downmixes to mono by channel mean, resamples to
/// `target_rate` and peak-normalizes to at most 1.
pub fn load_audio(path: &Path, target_rate: u32) -> Result<AudioClip, AudioError> {
    if !path.exists() {
        return Err(AudioError::FileNotFound(path.display().to_string()));
    }
    let decode_err = |e: hound::Error| AudioError::DecodeError {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut reader = hound::WavReader::open(path).map_err(decode_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>().map_err(decode_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(decode_err)?
        }
    };
    let mono = downmix(&interleaved, channels);
    let track_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if mono.is_empty() {
        return Err(AudioError::EmptyAudio(path.display().to_string()));
    }
    let mut clip = AudioClip::new(track_id, mono, spec.sample_rate);
    if spec.sample_rate != target_rate {
        clip = AudioClip::new(
            clip.track_id.clone(),
            resample(&clip.samples, spec.sample_rate, target_rate),
            target_rate,
        );
    }
    clip.normalize_peak();
    Ok(clip)
}

/// Channel mean of interleaved frames.
pub fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels <= 1 {
        return interleaved.to_vec();
    }
    let inv = 1.0 / channels as f32;
    interleaved
        .chunks_exact(channels)
        .map(|f| f.iter().sum::<f32>() * inv)
        .collect()
}

/// Writes 16-bit PCM mono WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let err = |e: hound::Error| AudioError::DecodeError {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(err)?;
    }
    w.finalize().map_err(err)
}

const SINC_ZERO_CROSSINGS: f64 = 16.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// Output length is `round(len * to / from)`; the kernel cutoff sits at the
/// lower of the two Nyquist frequencies.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let cutoff = ratio.min(1.0);
    let half_width = SINC_ZERO_CROSSINGS / cutoff;
    let n_out = (samples.len() as f64 * ratio).round() as usize;
    let len = samples.len() as isize;
    let tap = |d: f64| {
        if d.abs() > half_width {
            return 0.0;
        }
        let w = 0.5 + 0.5 * (std::f64::consts::PI * d / half_width).cos();
        cutoff * sinc(cutoff * d) * w
    };
    let g = gcd(from as u64, to as u64);
    let (up, down) = ((to as u64 / g) as usize, (from as u64 / g) as usize);
    let reach = half_width.ceil() as isize;
    let mut out = Vec::with_capacity(n_out);
    if up <= MAX_PHASES {
        // output n sits at input position (n * down) / up; one tap table
        // per fractional phase
        let phases: Vec<Vec<f64>> = (0..up)
            .map(|p| (-reach..=reach).map(|j| tap(p as f64 / up as f64 - j as f64)).collect())
            .collect();
        for n in 0..n_out {
            let pos = n * down;
            let (i0, p) = ((pos / up) as isize, pos % up);
            let taps = &phases[p];
            let lo = (i0 - reach).max(0);
            let hi = (i0 + reach).min(len - 1);
            let mut acc = 0.0;
            for i in lo..=hi {
                acc += samples[i as usize] as f64 * taps[(i - i0 + reach) as usize];
            }
            out.push(acc as f32);
        }
        return out;
    }
    for n in 0..n_out {
        let t = n as f64 / ratio;
        let lo = (t - half_width).ceil() as isize;
        let hi = (t + half_width).floor() as isize;
        let mut acc = 0.0;
        for i in lo.max(0)..=hi.min(len - 1) {
            acc += samples[i as usize] as f64 * tap(t - i as f64);
        }
        out.push(acc as f32);
    }
    out
}

const MAX_PHASES: usize = 1024;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
