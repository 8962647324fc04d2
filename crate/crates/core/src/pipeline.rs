//! Stage orchestration over a work directory.
//!
//! ```text
//! workdir/
//!   features/   one CQTF1 file per manifest track
//!   ckpt/       coarse.ckpt, fine.ckpt and their training logs
//!   align/      alignment table
//!   emb/        gallery embeddings (EMB1)
//!   index/      gallery index
//!   reports/    search results and the evaluation report
//! ```
//!
//! Every stage writes a `.<stage>.done` marker next to its outputs after they
//! are complete; a stage whose marker exists is skipped unless forced.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{AlignConfig, AlignError, AlignmentTable, ChunkEmbedding};
use crate::audio::{compute_cqt, load_audio, AudioError, CqtConfig, CqtFeature, CqtPlan, Manifest, Split};
use crate::augment::AugmentConfig;
use crate::binio::write_atomic;
use crate::encoder::{EmbeddingSource, Encoder, EncoderConfig};
use crate::eval::{evaluate, EvalError, EvalReport, QueryRanking};
use crate::losses::LossConfig;
use crate::nn::checkpoint::Checkpoint;
use crate::pooling::PoolingConfig;
use crate::retrieval::{load_embeddings, save_embeddings, GalleryIndex, IndexMode, RetrievalError};
use crate::synth::SynthConfig;
use crate::trainer::{
    embed_track, log_to_tsv, run_alignment, train_coarse, train_fine, ModelState, TrainConfig, TrainError, TrainSetup, TrainingSet,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("missing artifact of stage {stage}: {path}")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{0}")]
    Internal(String),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 missing artifact, 4 data, 5 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigInvalid(_) => 2,
            PipelineError::MissingArtifact { .. } => 3,
            PipelineError::Data(_) => 4,
            PipelineError::Divergence(_) => 5,
            PipelineError::Internal(_) => 1,
        }
    }
}

impl From<AudioError> for PipelineError {
    fn from(e: AudioError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<AlignError> for PipelineError {
    fn from(e: AlignError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<RetrievalError> for PipelineError {
    fn from(e: RetrievalError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => PipelineError::Divergence(e.to_string()),
            TrainError::Config(m) => PipelineError::ConfigInvalid(m),
            TrainError::EmptyCorpus | TrainError::EmptyAlignmentTable | TrainError::Checkpoint(_) => PipelineError::Data(e.to_string()),
            other => PipelineError::Internal(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub manifest: PathBuf,
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: "corpus/manifest.tsv".into(),
            workdir: "work".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySet {
    /// Test-split tracks.
    Test,
    /// Every track.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub chunk_s: f64,
    pub hop_s: f64,
    pub ann: bool,
    pub probes: usize,
    pub top_k: usize,
    pub queries: QuerySet,
    pub model: ModelChoice,
    pub embedding: EmbeddingSource,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            chunk_s: 45.0,
            hop_s: 45.0,
            ann: false,
            probes: 8,
            top_k: 10,
            queries: QuerySet::Test,
            model: ModelChoice::Fine,
            embedding: EmbeddingSource::default(),
        }
    }
}

impl RetrievalConfig {
    pub fn index_mode(&self, seed: u64) -> IndexMode {
        if self.ann {
            IndexMode::Ann { probes: self.probes, seed }
        } else {
            IndexMode::Exact
        }
    }
}

/// The whole configuration file. `encoder.n_classes` is replaced by the
/// number of training works when training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub cqt: CqtConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub pooling: PoolingConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub align: AlignConfig,
    pub retrieval: RetrievalConfig,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    /// Small settings for the bundled synthetic corpus: 48 CQT bins at
    /// 10 frames per second and a narrow encoder.
    pub fn toy() -> Self {
        let cqt = CqtConfig {
            hop_s: 0.1,
            min_window_s: 0.2,
            bins: 48,
            f_min: 65.41,
            ..CqtConfig::default()
        };
        let encoder = EncoderConfig {
            input_bins: cqt.bins,
            model_dim: 32,
            ..EncoderConfig::toy(8)
        };
        let mut augment = AugmentConfig::disabled();
        augment.p_pitch = 0.5;
        augment.pitch_shift_bins = 2;
        augment.p_mask = 0.5;
        augment.mask.max_frames = 10;
        augment.mask.max_bins = 6;
        Self {
            cqt,
            encoder,
            augment,
            train: TrainConfig {
                coarse_steps: 400,
                fine_steps: 200,
                ..TrainConfig::default()
            },
            synth: SynthConfig {
                n_works: 8,
                n_versions: 5,
                junk_prelude_s_max: 30.0,
                test_versions: 1,
                ..SynthConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Parses `text` after applying `section.key=value` overrides; values
    /// are TOML literals, bare words are taken as strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| PipelineError::ConfigInvalid(format!("override {o:?} is not key=value")))?;
            let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| PipelineError::ConfigInvalid(format!("empty key in {o:?}")))?;
            let mut table = &mut root;
            for p in parts {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| PipelineError::ConfigInvalid(format!("{p} is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::ConfigInvalid(e.to_string()))?;
        Ok(cfg)
    }

    /// Checks every section; does not touch the file system.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = PipelineError::ConfigInvalid;
        self.cqt.validate().map_err(bad)?;
        self.augment.validate().map_err(bad)?;
        self.encoder.validate().map_err(bad)?;
        self.pooling.validate(self.encoder.model_dim).map_err(bad)?;
        self.loss.validate().map_err(bad)?;
        self.train.validate().map_err(bad)?;
        self.align.validate().map_err(bad)?;
        if self.encoder.input_bins != self.cqt.bins {
            return Err(bad(format!(
                "encoder.input_bins {} differs from cqt.bins {}",
                self.encoder.input_bins, self.cqt.bins
            )));
        }
        let r = &self.retrieval;
        if !(r.chunk_s > 0.0 && r.hop_s > 0.0 && r.hop_s <= r.chunk_s) {
            return Err(bad(format!("retrieval chunking {} s / {} s invalid", r.chunk_s, r.hop_s)));
        }
        if r.ann && r.probes == 0 {
            return Err(bad("retrieval.probes must be positive".into()));
        }
        if r.top_k == 0 {
            return Err(bad("retrieval.top_k must be positive".into()));
        }
        Ok(())
    }

    fn setup(&self, n_classes: usize) -> TrainSetup {
        TrainSetup {
            encoder: Encoder::new(
                EncoderConfig {
                    n_classes,
                    ..self.encoder.clone()
                },
                self.pooling.clone(),
            ),
            loss: self.loss.clone(),
            augment: self.augment.clone(),
            train: self.train.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageName {
    Extract,
    TrainCoarse,
    Align,
    TrainFine,
    Embed,
    Index,
    Search,
    Eval,
}

impl StageName {
    pub const ALL: [StageName; 8] = [
        StageName::Extract,
        StageName::TrainCoarse,
        StageName::Align,
        StageName::TrainFine,
        StageName::Embed,
        StageName::Index,
        StageName::Search,
        StageName::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Extract => "extract",
            StageName::TrainCoarse => "train-coarse",
            StageName::Align => "align",
            StageName::TrainFine => "train-fine",
            StageName::Embed => "embed",
            StageName::Index => "index",
            StageName::Search => "search",
            StageName::Eval => "eval",
        }
    }
}

/// Artifact locations inside the work directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn dir(&self, stage: StageName) -> PathBuf {
        self.root.join(match stage {
            StageName::Extract => "features",
            StageName::TrainCoarse | StageName::TrainFine => "ckpt",
            StageName::Align => "align",
            StageName::Embed => "emb",
            StageName::Index => "index",
            StageName::Search | StageName::Eval => "reports",
        })
    }

    pub fn marker(&self, stage: StageName) -> PathBuf {
        self.dir(stage).join(format!(".{}.done", stage.as_str()))
    }

    pub fn is_done(&self, stage: StageName) -> bool {
        self.marker(stage).exists()
    }

    pub fn feature(&self, index: usize, track_id: &str) -> PathBuf {
        let safe: String = track_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect();
        self.dir(StageName::Extract).join(format!("{index:05}_{safe}.cqtf"))
    }

    pub fn checkpoint(&self, model: ModelChoice) -> PathBuf {
        self.dir(StageName::TrainCoarse).join(match model {
            ModelChoice::Coarse => "coarse.ckpt",
            ModelChoice::Fine => "fine.ckpt",
        })
    }

    pub fn train_log(&self, model: ModelChoice) -> PathBuf {
        self.dir(StageName::TrainCoarse).join(match model {
            ModelChoice::Coarse => "coarse.log.tsv",
            ModelChoice::Fine => "fine.log.tsv",
        })
    }

    pub fn alignment(&self) -> PathBuf {
        self.dir(StageName::Align).join("alignment.tsv")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.dir(StageName::Embed).join("gallery.emb")
    }

    pub fn index(&self) -> PathBuf {
        self.dir(StageName::Index).join("gallery.idx")
    }

    pub fn search_results(&self) -> PathBuf {
        self.dir(StageName::Search).join("search.tsv")
    }

    pub fn report(&self) -> PathBuf {
        self.dir(StageName::Eval).join("eval.txt")
    }

    fn finish(&self, stage: StageName) -> Result<(), PipelineError> {
        write_atomic(&self.marker(stage), stage.as_str().as_bytes())?;
        Ok(())
    }

    fn require(&self, stage: StageName, path: PathBuf) -> Result<PathBuf, PipelineError> {
        if path.exists() && self.is_done(stage) {
            Ok(path)
        } else {
            Err(PipelineError::MissingArtifact {
                stage: stage.as_str(),
                path,
            })
        }
    }
}

/// What happened to a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

/// A validated configuration with its manifest, ready to run stages.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub manifest: Manifest,
    pub work: Workdir,
    pub force: bool,
}

impl Pipeline {
    /// Validates `cfg` and loads the manifest.
    pub fn open(cfg: PipelineConfig, force: bool) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if !cfg.paths.manifest.exists() {
            return Err(PipelineError::ConfigInvalid(format!(
                "manifest {} does not exist",
                cfg.paths.manifest.display()
            )));
        }
        let manifest = Manifest::load(&cfg.paths.manifest)?;
        if manifest.records.is_empty() {
            return Err(PipelineError::Data("manifest has no records".into()));
        }
        let work = Workdir::new(&cfg.paths.workdir);
        Ok(Self { cfg, manifest, work, force })
    }

    /// The stages `stage` depends on, in order, followed by itself.
    pub fn plan(target: StageName) -> Vec<StageName> {
        let pos = StageName::ALL.iter().position(|s| *s == target).expect("known stage");
        StageName::ALL[..=pos].to_vec()
    }

    /// Describes the stage graph and artifact state without running anything.
    pub fn dry_run(&self) -> String {
        let mut s = String::new();
        let train = self.manifest.split(Split::Train).count();
        let _ = writeln!(
            s,
            "manifest {} ({} tracks, {} training, {} training works)",
            self.cfg.paths.manifest.display(),
            self.manifest.records.len(),
            train,
            self.train_works()
        );
        for st in StageName::ALL {
            let state = if self.is_done(st) { "done" } else { "pending" };
            let _ = writeln!(s, "{:<13} {state}", st.as_str());
        }
        s
    }

    fn train_works(&self) -> usize {
        let mut works: Vec<&str> = self.manifest.split(Split::Train).map(|r| r.work_id.as_str()).collect();
        works.sort_unstable();
        works.dedup();
        works.len()
    }

    pub fn is_done(&self, stage: StageName) -> bool {
        self.work.is_done(stage)
    }

    /// Runs `stage` unless it is already complete (and not forced).
    pub fn run_stage(&self, stage: StageName) -> Result<StageOutcome, PipelineError> {
        if self.is_done(stage) && !self.force {
            log::info!("{} already complete; skipping", stage.as_str());
            return Ok(StageOutcome::Skipped);
        }
        std::fs::create_dir_all(self.work.dir(stage))?;
        let _ = std::fs::remove_file(self.work.marker(stage));
        log::info!("running {}", stage.as_str());
        match stage {
            StageName::Extract => self.extract()?,
            StageName::TrainCoarse => self.train_coarse()?,
            StageName::Align => self.align()?,
            StageName::TrainFine => self.train_fine()?,
            StageName::Embed => self.embed()?,
            StageName::Index => self.index()?,
            StageName::Search => self.search()?,
            StageName::Eval => {
                self.eval()?;
            }
        }
        self.work.finish(stage)?;
        Ok(StageOutcome::Ran)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<(), PipelineError> {
        for st in StageName::ALL {
            self.run_stage(st)?;
        }
        Ok(())
    }

    fn extract(&self) -> Result<(), PipelineError> {
        let plan = CqtPlan::new(&self.cfg.cqt);
        for (i, r) in self.manifest.records.iter().enumerate() {
            let clip = load_audio(&r.path, self.cfg.cqt.sample_rate)?;
            let clip = crate::audio::AudioClip { track_id: r.track_id.clone(), ..clip };
            let feat = compute_cqt(&clip, &plan)?;
            feat.save(&self.work.feature(i, &r.track_id))?;
        }
        Ok(())
    }

    /// Features of every track, in manifest order.
    pub fn features(&self) -> Result<Vec<CqtFeature>, PipelineError> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let path = self.work.require(StageName::Extract, self.work.feature(i, &r.track_id))?;
                Ok(CqtFeature::load(&path, &r.track_id)?)
            })
            .collect()
    }

    /// The training split. Only training-split feature files are read.
    pub fn training_set(&self) -> Result<TrainingSet, PipelineError> {
        let index: HashMap<&str, usize> = self
            .manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.track_id.as_str(), i))
            .collect();
        let set = TrainingSet::from_manifest(&self.manifest, |r| {
            let path = self.work.require(StageName::Extract, self.work.feature(index[r.track_id.as_str()], &r.track_id))?;
            Ok::<_, PipelineError>(CqtFeature::load(&path, &r.track_id)?)
        })?;
        if set.tracks.is_empty() {
            return Err(PipelineError::Data("manifest has no training-split tracks".into()));
        }
        Ok(set)
    }

    pub fn train_setup(&self) -> TrainSetup {
        self.cfg.setup(self.train_works())
    }

    fn write_training(&self, model: ModelChoice, state: &ModelState, log: &[crate::trainer::LogRecord]) -> Result<(), PipelineError> {
        state.to_checkpoint().save(&self.work.checkpoint(model))?;
        write_atomic(&self.work.train_log(model), log_to_tsv(log).as_bytes())?;
        Ok(())
    }

    fn train_coarse(&self) -> Result<(), PipelineError> {
        let set = self.training_set()?;
        let trained = train_coarse(&self.train_setup(), &set)?;
        self.write_training(ModelChoice::Coarse, &trained.state, &trained.log)
    }

    pub fn load_checkpoint(&self, model: ModelChoice) -> Result<Checkpoint, PipelineError> {
        let stage = match model {
            ModelChoice::Coarse => StageName::TrainCoarse,
            ModelChoice::Fine => StageName::TrainFine,
        };
        let path = self.work.require(stage, self.work.checkpoint(model))?;
        Ok(Checkpoint::load(&path)?)
    }

    fn align(&self) -> Result<(), PipelineError> {
        let ck = self.load_checkpoint(ModelChoice::Coarse)?;
        let set = self.training_set()?;
        let table = run_alignment(&self.train_setup().encoder, &ck, &set, &self.cfg.align)?;
        log::info!(
            "aligned {} track pairs ({} chunk pairs, {} pairs without matches)",
            table.offsets.len(),
            table.rows.len(),
            table.skipped.len()
        );
        table.save(&self.work.alignment())?;
        Ok(())
    }

    pub fn alignment_table(&self) -> Result<AlignmentTable, PipelineError> {
        let path = self.work.require(StageName::Align, self.work.alignment())?;
        Ok(AlignmentTable::load(&path)?)
    }

    fn train_fine(&self) -> Result<(), PipelineError> {
        let ck = self.load_checkpoint(ModelChoice::Coarse)?;
        let table = self.alignment_table()?;
        let set = self.training_set()?;
        let trained = train_fine(&self.train_setup(), &ck, &table, &set)?;
        self.write_training(ModelChoice::Fine, &trained.state, &trained.log)
    }

    fn embed(&self) -> Result<(), PipelineError> {
        let setup = self.train_setup();
        let ck = self.load_checkpoint(self.cfg.retrieval.model)?;
        let mut state = ModelState::from_checkpoint(&setup.encoder, &ck)?;
        let feats = self.features()?;
        let mut all = Vec::new();
        for (r, f) in self.manifest.records.iter().zip(&feats) {
            all.extend(embed_track(
                &setup.encoder,
                &mut state.store,
                f,
                &r.work_id,
                self.cfg.retrieval.chunk_s,
                self.cfg.retrieval.hop_s,
                self.cfg.retrieval.embedding,
            )?);
        }
        save_embeddings(&self.work.embeddings(), &all)?;
        Ok(())
    }

    pub fn embeddings(&self) -> Result<Vec<ChunkEmbedding>, PipelineError> {
        let path = self.work.require(StageName::Embed, self.work.embeddings())?;
        Ok(load_embeddings(&path)?)
    }

    fn index(&self) -> Result<(), PipelineError> {
        let embs = self.embeddings()?;
        let idx = GalleryIndex::build(&embs, self.cfg.retrieval.index_mode(self.cfg.train.seed))?;
        idx.save(&self.work.index())?;
        Ok(())
    }

    fn query_tracks(&self) -> Vec<&str> {
        let test: Vec<&str> = self.manifest.split(Split::Test).map(|r| r.track_id.as_str()).collect();
        match self.cfg.retrieval.queries {
            QuerySet::Test => test,
            QuerySet::All => self.manifest.records.iter().map(|r| r.track_id.as_str()).collect(),
        }
    }

    /// Ranked gallery tracks for every query track, `k` deep.
    fn rankings(&self, k: usize) -> Result<Vec<(String, crate::retrieval::QueryResult)>, PipelineError> {
        let path = self.work.require(StageName::Index, self.work.index())?;
        let idx = GalleryIndex::load(&path)?;
        let embs = self.embeddings()?;
        let mut by_track: HashMap<&str, Vec<Vec<f32>>> = HashMap::new();
        for e in &embs {
            by_track.entry(e.track_id.as_str()).or_default().push(e.vector.clone());
        }
        let queries = self.query_tracks();
        if queries.is_empty() {
            return Err(PipelineError::Data("no query tracks (the manifest has no test split)".into()));
        }
        let mut out = Vec::new();
        for q in queries {
            let Some(chunks) = by_track.get(q) else {
                log::warn!("query {q} has no embeddings; skipped");
                continue;
            };
            out.push((q.to_string(), idx.query(chunks, k, &[q])?));
        }
        Ok(out)
    }

    fn search(&self) -> Result<(), PipelineError> {
        let mut s = String::from("# query\trank\ttrack_id\twork_id\tdistance\tquery_chunk\tgallery_chunk\n");
        for (q, res) in self.rankings(self.cfg.retrieval.top_k)? {
            for (i, h) in res.hits.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{q}\t{}\t{}\t{}\t{:.6}\t{}\t{}",
                    i + 1,
                    h.track_id,
                    h.work_id,
                    h.distance,
                    h.query_chunk,
                    h.gallery_chunk
                );
            }
        }
        write_atomic(&self.work.search_results(), s.as_bytes())?;
        Ok(())
    }

    /// Scores full rankings of every query against the whole gallery and
    /// writes the report.
    pub fn eval(&self) -> Result<EvalReport, PipelineError> {
        let gallery: Vec<String> = self.manifest.records.iter().map(|r| r.track_id.clone()).collect();
        let work_of: HashMap<String, String> = self
            .manifest
            .records
            .iter()
            .map(|r| (r.track_id.clone(), r.work_id.clone()))
            .collect();
        let queries: Vec<QueryRanking> = self
            .rankings(gallery.len())?
            .into_iter()
            .map(|(q, res)| QueryRanking {
                query_track: q,
                ranking: res.hits.into_iter().map(|h| h.track_id).collect(),
            })
            .collect();
        let report = evaluate(&queries, &gallery, &work_of)?;
        report.save(&self.work.report())?;
        Ok(report)
    }
}
