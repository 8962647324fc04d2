//! Training-time augmentation: noise mixing, volume, pitch-preserving speed
//! change on audio; pitch roll and rectangle masks on CQT features.

use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{compute_cqt, AudioClip, AudioError, CqtFeature, CqtPlan, LOG_FLOOR};
use crate::nn::Rng;

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("signal has zero power: {0}")]
    SilentSignal(&'static str),
    #[error("speed ratio {0} outside (0, 2]")]
    RatioOutOfRange(f64),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Up to `count` rectangles, each at most `max_frames x max_bins`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub count: usize,
    pub max_frames: usize,
    pub max_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub snr_db_range: [f64; 2],
    pub volume_db_range: [f64; 2],
    pub speed_range: [f64; 2],
    /// Symmetric: shifts are drawn from `[-pitch_shift_bins, pitch_shift_bins]`.
    pub pitch_shift_bins: i32,
    pub mask: MaskSpec,
    pub p_volume: f64,
    pub p_speed: f64,
    pub p_noise: f64,
    pub p_pitch: f64,
    pub p_mask: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            snr_db_range: [-10.0, 30.0],
            volume_db_range: [-6.0, 0.0],
            speed_range: [0.8, 1.2],
            pitch_shift_bins: 5,
            mask: MaskSpec {
                count: 3,
                max_frames: 20,
                max_bins: 12,
            },
            p_volume: 0.5,
            p_speed: 0.5,
            p_noise: 0.5,
            p_pitch: 0.5,
            p_mask: 0.5,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn disabled() -> Self {
        Self {
            p_volume: 0.0,
            p_speed: 0.0,
            p_noise: 0.0,
            p_pitch: 0.0,
            p_mask: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.snr_db_range) || !ordered(self.volume_db_range) || !ordered(self.speed_range) {
            return Err("augment ranges must be finite and ordered".into());
        }
        if self.speed_range[0] <= 0.0 || self.speed_range[1] > 2.0 {
            return Err("speed_range must lie in (0, 2]".into());
        }
        if self.pitch_shift_bins < 0 {
            return Err("pitch_shift_bins must be non-negative".into());
        }
        for p in [self.p_volume, self.p_speed, self.p_noise, self.p_pitch, self.p_mask] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("augment probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// The noise term `g * noise` (looped or cropped to the clip's length) that
/// sets the clip-to-noise power ratio to `snr_db`.
pub fn scaled_noise(clip: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<Vec<f32>, AugmentError> {
    let pc = clip.power();
    if pc == 0.0 {
        return Err(AugmentError::SilentSignal("clip"));
    }
    if noise.samples.is_empty() || noise.power() == 0.0 {
        return Err(AugmentError::SilentSignal("noise"));
    }
    let looped: Vec<f64> = noise
        .samples
        .iter()
        .cycle()
        .take(clip.samples.len())
        .map(|&v| v as f64)
        .collect();
    let pn = looped.iter().map(|v| v * v).sum::<f64>() / looped.len() as f64;
    if pn == 0.0 {
        return Err(AugmentError::SilentSignal("noise"));
    }
    let g = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(looped.iter().map(|v| (g * v) as f32).collect())
}

/// `clip + g * noise` at the requested SNR, then peak-normalized to at most 1.
pub fn mix_noise(clip: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<AudioClip, AugmentError> {
    let n = scaled_noise(clip, noise, snr_db)?;
    let samples = clip.samples.iter().zip(&n).map(|(a, b)| a + b).collect();
    let mut out = AudioClip::new(clip.track_id.clone(), samples, clip.sample_rate);
    out.normalize_peak();
    Ok(out)
}

pub fn change_volume(clip: &AudioClip, gain_db: f64) -> AudioClip {
    let g = db_to_amplitude(gain_db);
    let samples = clip.samples.iter().map(|&v| (v as f64 * g) as f32).collect();
    AudioClip::new(clip.track_id.clone(), samples, clip.sample_rate)
}

const PV_FFT: usize = 1024;
const PV_HOP: usize = 256;

fn wrap_phase(p: f64) -> f64 {
    use std::f64::consts::PI;
    p - 2.0 * PI * ((p + PI) / (2.0 * PI)).floor()
}

/// Pitch-preserving time stretch by a phase vocoder. `ratio > 1` speeds the
/// clip up; the output has `round(len / ratio)` samples.
pub fn change_speed(clip: &AudioClip, ratio: f64) -> Result<AudioClip, AugmentError> {
    if !(ratio > 0.0 && ratio <= 2.0) {
        return Err(AugmentError::RatioOutOfRange(ratio));
    }
    let n_out = (clip.samples.len() as f64 / ratio).round() as usize;
    if clip.samples.is_empty() {
        return Ok(clip.clone());
    }
    let n = PV_FFT;
    let half = n / 2;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    let mut padded = vec![0.0f64; half];
    padded.extend(clip.samples.iter().map(|&v| v as f64));
    padded.extend(std::iter::repeat(0.0).take(n));

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let n_frames = n_out / PV_HOP + 2;
    let out_len = n_frames * PV_HOP + n;
    let mut out = vec![0.0f64; out_len];
    let mut norm = vec![0.0f64; out_len];
    let bins = n / 2 + 1;
    let mut prev_phase = vec![0.0f64; bins];
    let mut synth_phase = vec![0.0f64; bins];
    let mut prev_pos = 0usize;
    let mut buf = vec![Complex::new(0.0, 0.0); n];

    for m in 0..n_frames {
        let pos = (m as f64 * PV_HOP as f64 * ratio).round() as usize;
        for (i, b) in buf.iter_mut().enumerate() {
            let v = padded.get(pos + i).copied().unwrap_or(0.0);
            *b = Complex::new(v * window[i], 0.0);
        }
        fwd.process(&mut buf);
        let step = pos - prev_pos;
        for k in 0..bins {
            let (mag, ph) = buf[k].to_polar();
            if m == 0 {
                synth_phase[k] = ph;
            } else {
                let omega = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                let inst = if step > 0 {
                    omega + wrap_phase(ph - prev_phase[k] - omega * step as f64) / step as f64
                } else {
                    omega
                };
                synth_phase[k] += inst * PV_HOP as f64;
            }
            prev_phase[k] = ph;
            buf[k] = Complex::from_polar(mag, synth_phase[k]);
        }
        for k in 1..n - bins + 1 {
            buf[n - k] = buf[k].conj();
        }
        inv.process(&mut buf);
        let start = m * PV_HOP;
        for i in 0..n {
            out[start + i] += buf[i].re / n as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
        prev_pos = pos;
    }
    let samples = (0..n_out)
        .map(|i| {
            let j = i + half;
            let w = norm[j];
            (if w > 1e-6 { out[j] / w } else { 0.0 }) as f32
        })
        .collect();
    Ok(AudioClip::new(clip.track_id.clone(), samples, clip.sample_rate))
}

/// Rolls the frequency axis: output bin `j` takes input bin `j - shift`;
/// vacated bins hold the log floor.
pub fn pitch_roll(feat: &CqtFeature, shift: i32) -> CqtFeature {
    let f = feat.bins as i64;
    let mut out = feat.clone();
    for t in 0..feat.n_frames {
        let src = feat.frame(t);
        let dst = &mut out.frames[t * feat.bins..(t + 1) * feat.bins];
        for (j, d) in dst.iter_mut().enumerate() {
            let s = j as i64 - shift as i64;
            *d = if (0..f).contains(&s) { src[s as usize] } else { LOG_FLOOR };
        }
    }
    out
}

/// Masked region: frames `[t0, t0 + frames)`, bins `[f0, f0 + bins)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub t0: usize,
    pub frames: usize,
    pub f0: usize,
    pub bins: usize,
}

/// Draws `spec.count` rectangles that fit inside a `n_frames x n_bins` plane.
pub fn sample_rectangles(n_frames: usize, n_bins: usize, spec: &MaskSpec, rng: &mut Rng) -> Vec<Rect> {
    if n_frames == 0 || n_bins == 0 || spec.max_frames == 0 || spec.max_bins == 0 {
        return Vec::new();
    }
    (0..spec.count)
        .map(|_| {
            let frames = rng.gen_range(1..=spec.max_frames.min(n_frames));
            let bins = rng.gen_range(1..=spec.max_bins.min(n_bins));
            Rect {
                t0: rng.gen_range(0..=n_frames - frames),
                frames,
                f0: rng.gen_range(0..=n_bins - bins),
                bins,
            }
        })
        .collect()
}

pub fn apply_rectangles(feat: &CqtFeature, rects: &[Rect]) -> CqtFeature {
    let mut out = feat.clone();
    for r in rects {
        for t in r.t0..(r.t0 + r.frames).min(feat.n_frames) {
            for f in r.f0..(r.f0 + r.bins).min(feat.bins) {
                out.frames[t * feat.bins + f] = LOG_FLOOR;
            }
        }
    }
    out
}

pub fn mask_rectangles(feat: &CqtFeature, spec: &MaskSpec, rng: &mut Rng) -> CqtFeature {
    let rects = sample_rectangles(feat.n_frames, feat.bins, spec, rng);
    apply_rectangles(feat, &rects)
}

fn draw(rng: &mut Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

/// Audio-domain stage: volume, speed and noise, each applied independently
/// with its configured probability.
pub fn augment_audio(
    clip: &AudioClip,
    noise_pool: &[AudioClip],
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<AudioClip, AugmentError> {
    let mut clip = clip.clone();
    if rng.gen_bool(cfg.p_volume) {
        clip = change_volume(&clip, draw(rng, cfg.volume_db_range));
    }
    if rng.gen_bool(cfg.p_speed) {
        clip = change_speed(&clip, draw(rng, cfg.speed_range))?;
    }
    if !noise_pool.is_empty() && rng.gen_bool(cfg.p_noise) {
        let noise = &noise_pool[rng.gen_range(0..noise_pool.len())];
        let snr = draw(rng, cfg.snr_db_range);
        if clip.power() > 0.0 {
            clip = mix_noise(&clip, noise, snr)?;
        }
    }
    Ok(clip)
}

/// Feature-domain stage: pitch roll and rectangle masks.
pub fn augment_feature(feat: &CqtFeature, cfg: &AugmentConfig, rng: &mut Rng) -> CqtFeature {
    let mut feat = if rng.gen_bool(cfg.p_pitch) && cfg.pitch_shift_bins > 0 {
        let s = rng.gen_range(-cfg.pitch_shift_bins..=cfg.pitch_shift_bins);
        pitch_roll(feat, s)
    } else {
        feat.clone()
    };
    if rng.gen_bool(cfg.p_mask) {
        feat = mask_rectangles(&feat, &cfg.mask, rng);
    }
    feat
}

/// Full on-the-fly augmentation: audio stage, CQT, feature stage.
pub fn augment_pipeline(
    clip: &AudioClip,
    noise_pool: &[AudioClip],
    cfg: &AugmentConfig,
    plan: &CqtPlan,
    rng: &mut Rng,
) -> Result<CqtFeature, AugmentError> {
    let audio = augment_audio(clip, noise_pool, cfg, rng)?;
    let feat = compute_cqt(&audio, plan)?;
    Ok(augment_feature(&feat, cfg, rng))
}
