use std::f64::consts::PI;
use std::path::Path;

use coverhunter::audio::{
    compute_cqt, load_audio, write_wav, AudioClip, AudioError, CqtConfig, CqtFeature, CqtPlan, LOG_FLOOR,
};
use proptest::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn sine(freq: f64, seconds: f64, sr: u32, amp: f64) -> Vec<f32> {
    let n = (seconds * sr as f64).round() as usize;
    (0..n)
        .map(|i| (amp * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32)
        .collect()
}

fn write_raw(path: &Path, channels: u16, sr: u32, interleaved: &[f32]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: sr,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in interleaved {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

/// Frequency (Hz) of the largest-magnitude positive DFT bin.
fn dominant_frequency(samples: &[f32], sr: u32) -> f64 {
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let (k, _) = buf[1..buf.len() / 2]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
        .unwrap();
    (k + 1) as f64 * sr as f64 / samples.len() as f64
}

#[test]
fn load_silence_keeps_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("silence.wav");
    write_raw(&p, 1, 16000, &vec![0.0; 16000]);
    let clip = load_audio(&p, 16000).unwrap();
    assert_eq!(clip.samples.len(), 16000);
    assert!(clip.samples.iter().all(|&v| v == 0.0));
    assert_eq!(clip.track_id, "silence");
}

#[test]
fn load_upsamples_sine_preserving_pitch() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sine.wav");
    write_raw(&p, 1, 8000, &sine(440.0, 1.0, 8000, 0.8));
    let clip = load_audio(&p, 16000).unwrap();
    assert_eq!(clip.samples.len(), 16000);
    assert_eq!(clip.sample_rate, 16000);
    // one DFT bin is 1 Hz here
    let f = dominant_frequency(&clip.samples, 16000);
    assert!((f - 440.0).abs() <= 1.0, "dominant {f}");
    assert!(clip.peak() <= 1.0);
}

#[test]
fn load_downmixes_stereo() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("stereo.wav");
    let left = sine(300.0, 0.5, 16000, 0.6);
    let right = sine(500.0, 0.5, 16000, 0.3);
    let inter: Vec<f32> = left.iter().zip(&right).flat_map(|(&l, &r)| [l, r]).collect();
    write_raw(&p, 2, 16000, &inter);
    let clip = load_audio(&p, 16000).unwrap();
    let mean: Vec<f32> = left.iter().zip(&right).map(|(l, r)| (l + r) / 2.0).collect();
    assert_eq!(clip.samples, mean);
    let energy = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
    assert!((energy(&clip.samples) - energy(&mean)).abs() < 1e-9);
}

#[test]
fn load_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_audio(&dir.path().join("missing.wav"), 16000),
        Err(AudioError::FileNotFound(_))
    ));
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"definitely not a wav").unwrap();
    assert!(matches!(load_audio(&junk, 16000), Err(AudioError::DecodeError { .. })));
    let empty = dir.path().join("empty.wav");
    write_raw(&empty, 1, 16000, &[]);
    assert!(matches!(load_audio(&empty, 16000), Err(AudioError::EmptyAudio(_))));
}

#[test]
fn wav_writer_round_trips_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("q.wav");
    let clip = AudioClip::new("q", sine(220.0, 0.25, 16000, 0.5), 16000);
    write_wav(&p, &clip).unwrap();
    let back = load_audio(&p, 16000).unwrap();
    assert_eq!(back.samples.len(), clip.samples.len());
    for (a, b) in back.samples.iter().zip(&clip.samples) {
        assert!((a - b).abs() < 1.0 / 16000.0);
    }
}

#[test]
fn cqt_frame_count_and_bins() {
    let plan = CqtPlan::new(&CqtConfig::default());
    let clip = AudioClip::new("x", sine(440.0, 10.0, 16000, 0.5), 16000);
    let f = compute_cqt(&clip, &plan).unwrap();
    assert!((249..=251).contains(&f.n_frames), "T = {}", f.n_frames);
    assert_eq!(f.bins, 96);
    assert_eq!(f.frame_rate, 25.0);
    assert!(f.frames.iter().all(|v| v.is_finite() && *v >= 0.0));
}

/// Direct time-domain response of every bin to `x` around `center`; an
/// oracle that shares nothing with the spectral-kernel implementation.
fn direct_bin_magnitudes(cfg: &CqtConfig, x: &[f32], center: usize) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    (0..cfg.bins)
        .map(|k| {
            let f = cfg.center_frequency(k);
            let n = cfg.window_len(k);
            let mut acc = Complex::new(0.0, 0.0);
            let mut wsum = 0.0;
            for i in 0..n {
                let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                wsum += w;
                let off = i as isize - (n / 2) as isize;
                let idx = center as isize + off;
                if idx < 0 || idx as usize >= x.len() {
                    continue;
                }
                let ph = -2.0 * PI * f * off as f64 / sr;
                acc += Complex::new(ph.cos(), ph.sin()) * (w * x[idx as usize] as f64);
            }
            acc.norm() / wsum
        })
        .collect()
}

fn argmax(v: &[f32]) -> usize {
    v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
}

#[test]
fn cqt_sine_peaks_at_its_bin() {
    let cfg = CqtConfig::default();
    let plan = CqtPlan::new(&cfg);
    for k in [0usize, 7, 20, 33, 47, 60, 71, 84, 95] {
        let f = cfg.center_frequency(k);
        let x = sine(f, 2.0, cfg.sample_rate, 0.5);
        let direct = direct_bin_magnitudes(&cfg, &x, x.len() / 2);
        let direct_arg = direct
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(direct_arg, k, "oracle peak for bin {k}");
        // unit-amplitude sine maps to magnitude 1/2 at its own bin
        assert!((direct[k] - 0.25).abs() < 0.01, "oracle magnitude {}", direct[k]);

        let feat = compute_cqt(&AudioClip::new("s", x.clone(), cfg.sample_rate), &plan).unwrap();
        assert_eq!(argmax(&feat.mean_spectrum()), k, "bin {k} ({f:.1} Hz)");
        let mid = feat.n_frames / 2;
        let implied = ((feat.get(mid, k) as f64).exp() - 1.0) * cfg.log_eps;
        assert!((implied - direct[k]).abs() < 0.02 * direct[k], "bin {k}: {implied} vs {}", direct[k]);
    }
}

#[test]
fn cqt_silence_is_floor() {
    let plan = CqtPlan::new(&CqtConfig::default());
    let f = compute_cqt(&AudioClip::new("z", vec![0.0; 32000], 16000), &plan).unwrap();
    assert!(f.frames.iter().all(|&v| v == LOG_FLOOR));
}

#[test]
fn cqt_too_short() {
    let cfg = CqtConfig::default();
    let plan = CqtPlan::new(&cfg);
    let clip = AudioClip::new("s", vec![0.1; cfg.longest_window() - 1], 16000);
    assert!(matches!(compute_cqt(&clip, &plan), Err(AudioError::TooShort { .. })));
}

#[test]
fn cqt_is_deterministic_and_shift_covariant() {
    let cfg = CqtConfig::default();
    let plan = CqtPlan::new(&cfg);
    let mut x = sine(196.0, 4.0, 16000, 0.3);
    for (i, v) in sine(523.25, 4.0, 16000, 0.2).into_iter().enumerate() {
        x[i] += v * ((i as f32 / 3000.0).sin());
    }
    let a = compute_cqt(&AudioClip::new("a", x.clone(), 16000), &plan).unwrap();
    let b = compute_cqt(&AudioClip::new("a", x.clone(), 16000), &plan).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());

    let n = 5;
    let mut shifted = vec![0.0f32; n * cfg.hop_samples()];
    shifted.extend_from_slice(&x);
    let s = compute_cqt(&AudioClip::new("s", shifted, 16000), &plan).unwrap();
    let margin = cfg.longest_window() / cfg.hop_samples() + 1;
    for t in margin..a.n_frames - margin {
        for k in 0..a.bins {
            let (u, v) = (a.get(t, k), s.get(t + n, k));
            assert!((u - v).abs() <= 1e-3 * u.abs().max(1e-3), "t {t} k {k}: {u} vs {v}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn cqtf1_round_trip_bit_exact(t in 0usize..20, f in 1usize..12, rate in any::<u32>(), seed in any::<u32>()) {
        let frames: Vec<f32> = (0..t * f)
            .map(|i| f32::from_bits(seed.wrapping_add(i as u32).wrapping_mul(0x9E37_79B9)))
            .collect();
        let feat = CqtFeature {
            frames,
            n_frames: t,
            bins: f,
            frame_rate: f32::from_bits(rate),
            bins_per_octave: 12,
            f_min: 32.7,
            track_id: "p".into(),
        };
        let bytes = feat.to_bytes();
        prop_assert_eq!(&bytes[..4], b"CQTF");
        let back = CqtFeature::read(&mut bytes.as_slice(), "p").unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.n_frames, t);
        prop_assert_eq!(back.bins, f);
    }
}
