//! Configuration handling and stage orchestration.

use std::path::Path;

use coverhunter::pipeline::*;
use coverhunter::synth::{write_corpus, SynthConfig};

/// Toy configuration shrunk so that a full run takes seconds.
fn tiny(root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::toy();
    cfg.paths.manifest = root.join("corpus").join("manifest.tsv");
    cfg.paths.workdir = root.join("work");
    cfg.cqt.bins = 24;
    cfg.cqt.f_min = 130.81;
    cfg.encoder.input_bins = 24;
    cfg.encoder.model_dim = 8;
    cfg.encoder.heads = 2;
    cfg.encoder.n_blocks = 1;
    cfg.encoder.conv_kernel = 3;
    cfg.encoder.bottleneck_dim = 8;
    cfg.train.coarse_steps = 3;
    cfg.train.fine_steps = 2;
    cfg.train.p_classes = 3;
    cfg.train.k_samples = 2;
    cfg.align.threshold = -1.0;
    cfg.retrieval.chunk_s = 15.0;
    cfg.retrieval.hop_s = 15.0;
    cfg.synth = SynthConfig {
        n_works: 3,
        n_versions: 3,
        duration_s: 20.0,
        junk_prelude_s_max: 7.5,
        test_versions: 1,
        sample_rate: 16000,
        ..SynthConfig::default()
    };
    cfg
}

fn with_corpus(root: &Path) -> PipelineConfig {
    let cfg = tiny(root);
    write_corpus(&cfg.synth, &cfg.paths.manifest).unwrap();
    cfg
}

#[test]
fn toml_round_trip() {
    for cfg in [PipelineConfig::default(), PipelineConfig::toy()] {
        let text = cfg.to_toml();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }
}

#[test]
fn missing_keys_take_defaults() {
    let cfg = PipelineConfig::from_toml("[train]\ncoarse_steps = 7\n").unwrap();
    assert_eq!(cfg.train.coarse_steps, 7);
    assert_eq!(cfg.train.fine_steps, PipelineConfig::default().train.fine_steps);
    assert_eq!(cfg.encoder, PipelineConfig::default().encoder);
}

#[test]
fn overrides_replace_keys() {
    let base = PipelineConfig::toy().to_toml();
    let cfg = PipelineConfig::from_toml_with_overrides(
        &base,
        &[
            "train.coarse_steps=12".into(),
            "paths.workdir=\"elsewhere\"".into(),
            "retrieval.ann=true".into(),
            "retrieval.queries=all".into(),
        ],
    )
    .unwrap();
    assert_eq!(cfg.train.coarse_steps, 12);
    assert_eq!(cfg.paths.workdir, Path::new("elsewhere"));
    assert!(cfg.retrieval.ann);
    assert_eq!(cfg.retrieval.queries, QuerySet::All);
    assert_eq!(cfg.cqt, PipelineConfig::toy().cqt);
}

#[test]
fn bad_configs_are_config_errors() {
    let base = PipelineConfig::toy().to_toml();
    for o in ["train.coarse_steps=\"many\"", "noequals", "train.lr.base=-1"] {
        let r = PipelineConfig::from_toml_with_overrides(&base, &[o.to_string()]).and_then(|c| c.validate());
        let e = r.unwrap_err();
        assert_eq!(e.exit_code(), 2, "{o}: {e}");
    }
    let mut cfg = PipelineConfig::toy();
    cfg.encoder.input_bins = 47;
    assert!(matches!(cfg.validate(), Err(PipelineError::ConfigInvalid(_))));
    assert!(PipelineConfig::from_toml("[train\n").is_err());
}

#[test]
fn open_requires_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let e = Pipeline::open(tiny(dir.path()), false).err().unwrap();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn later_stages_name_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::open(with_corpus(dir.path()), false).unwrap();
    match p.run_stage(StageName::Align) {
        Err(e @ PipelineError::MissingArtifact { .. }) => {
            assert_eq!(e.exit_code(), 3);
            assert!(e.to_string().contains("train-coarse"), "{e}");
        }
        other => panic!("{:?}", other.map(|_| ())),
    }
    assert!(!p.is_done(StageName::Align));
    assert!(matches!(p.run_stage(StageName::Eval), Err(PipelineError::MissingArtifact { .. })));
}

#[test]
fn plan_lists_prerequisites() {
    assert_eq!(Pipeline::plan(StageName::Extract), [StageName::Extract]);
    assert_eq!(Pipeline::plan(StageName::Eval).len(), 8);
    assert_eq!(
        Pipeline::plan(StageName::Align),
        [StageName::Extract, StageName::TrainCoarse, StageName::Align]
    );
}

#[test]
fn full_run_is_idempotent_and_reproducible() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut runs = Vec::new();
    for d in &dirs {
        let p = Pipeline::open(with_corpus(d.path()), false).unwrap();
        assert!(p.dry_run().contains("extract       pending"));
        p.run_all().unwrap();
        assert!(StageName::ALL.iter().all(|&s| p.is_done(s)));
        assert_eq!(p.run_stage(StageName::TrainCoarse).unwrap(), StageOutcome::Skipped);
        let report = std::fs::read(p.work.report()).unwrap();
        let again = p.eval().unwrap();
        assert_eq!(std::fs::read(p.work.report()).unwrap(), report);
        assert_eq!(again.per_query.len(), 3);
        let read = |path: std::path::PathBuf| std::fs::read(path).unwrap();
        runs.push([
            read(p.work.checkpoint(ModelChoice::Coarse)),
            read(p.work.checkpoint(ModelChoice::Fine)),
            read(p.work.embeddings()),
            read(p.work.index()),
            read(p.work.search_results()),
            report,
        ]);
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn force_reruns_a_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_corpus(dir.path());
    let p = Pipeline::open(cfg.clone(), false).unwrap();
    assert_eq!(p.run_stage(StageName::Extract).unwrap(), StageOutcome::Ran);
    assert_eq!(p.run_stage(StageName::Extract).unwrap(), StageOutcome::Skipped);
    let forced = Pipeline::open(cfg, true).unwrap();
    assert_eq!(forced.run_stage(StageName::Extract).unwrap(), StageOutcome::Ran);
    assert_eq!(forced.features().unwrap().len(), 9);
}
