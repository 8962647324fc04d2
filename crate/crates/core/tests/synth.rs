//! Synthetic corpus generation.

use coverhunter::audio::{load_audio, Manifest, Split};
use coverhunter::synth::{generate, planted_delta, write_corpus, SynthConfig};

fn small() -> SynthConfig {
    SynthConfig {
        n_works: 3,
        n_versions: 3,
        duration_s: 6.0,
        sample_rate: 8000,
        ..SynthConfig::default()
    }
}

#[test]
fn no_prelude_means_zero_offsets() {
    let tracks = generate(&small()).unwrap();
    assert_eq!(tracks.len(), 9);
    assert!(tracks.iter().all(|t| t.record.offset_s == Some(0.0)));
}

#[test]
fn preludes_are_whole_steps_within_the_maximum() {
    let cfg = SynthConfig {
        junk_prelude_s_max: 30.0,
        n_works: 6,
        ..small()
    };
    let tracks = generate(&cfg).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for t in &tracks {
        let off = t.record.offset_s.unwrap();
        let steps = off / cfg.prelude_step_s;
        assert!((steps - steps.round()).abs() < 1e-12);
        assert!((0.0..=30.0).contains(&off));
        seen.insert(steps as i64);
        let body = cfg.duration_s / cfg.tempo_range[1];
        assert!(t.clip.duration_s() >= off + body - 1e-3);
    }
    assert!(seen.len() > 2, "{seen:?}");
}

#[test]
fn fixed_seed_reproduces_samples() {
    let a = generate(&small()).unwrap();
    let b = generate(&small()).unwrap();
    let c = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.record, y.record);
        assert_eq!(x.clip.samples, y.clip.samples);
    }
    assert_ne!(a[0].clip.samples, c[0].clip.samples);
}

#[test]
fn ids_works_and_splits() {
    let cfg = SynthConfig {
        n_versions: 4,
        test_versions: 1,
        ..small()
    };
    let tracks = generate(&cfg).unwrap();
    for t in &tracks {
        let r = &t.record;
        assert!(r.track_id.starts_with(&r.work_id));
        let test = r.track_id.ends_with("_v3");
        assert_eq!(r.split == Split::Test, test, "{}", r.track_id);
        assert!(t.clip.peak() <= 0.9 + 1e-6);
        assert!(t.clip.samples.iter().all(|s| s.is_finite()));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(generate(&SynthConfig { n_works: 1, ..small() }).is_err());
    assert!(generate(&SynthConfig { test_versions: 3, ..small() }).is_err());
    assert!(generate(&SynthConfig { tempo_range: [1.1, 1.0], ..small() }).is_err());
}

#[test]
fn written_corpus_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus").join("manifest.tsv");
    let written = write_corpus(&small(), &path).unwrap();
    let loaded = Manifest::load(&path).unwrap();
    assert_eq!(written, loaded);
    let mem = generate(&small()).unwrap();
    for (rec, t) in loaded.records.iter().zip(&mem) {
        let clip = load_audio(&rec.path, 8000).unwrap();
        assert_eq!(clip.samples.len(), t.clip.samples.len());
        let err = clip
            .samples
            .iter()
            .zip(&t.clip.samples)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn planted_delta_counts_hops() {
    assert_eq!(planted_delta(0.0, 15.0, 7.5), 2);
    assert_eq!(planted_delta(22.5, 0.0, 7.5), -3);
    assert_eq!(planted_delta(7.5, 7.5, 7.5), 0);
}
