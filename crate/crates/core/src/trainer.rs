//! Coarse training on fixed chunks, chunk alignment with the coarse model,
//! and fine training on aligned crops of random length.
//!
//! Training reads precomputed CQT features; augmentation is applied to the
//! feature crops (pitch roll, rectangle masks) as they are batched.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::align::{build_alignment_table, extend_with_length, AlignConfig, AlignmentTable, ChunkEmbedding};
use crate::audio::{chunk_feature, CqtFeature, Manifest, ManifestRecord, Split};
use crate::augment::{augment_feature, AugmentConfig};
use crate::encoder::{EmbeddingSource, Encoder, ModelError, DOWNSAMPLE_FACTOR};
use crate::losses::{center_loss, focal_loss, total_loss, triplet_loss, CenterBank, LossConfig, LossError, LossParts};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{AdamConfig, LrSchedule, NnError, ParamStore, Rng, Session, Tensor};
use crate::retrieval::normalize;

pub const CENTERS_KEY: &str = "loss.centers";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no training tracks")]
    EmptyCorpus,
    #[error("alignment table has no usable rows")]
    EmptyAlignmentTable,
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint does not match the model: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Classes per batch.
    pub p_classes: usize,
    /// Samples per class.
    pub k_samples: usize,
    pub coarse_steps: u64,
    pub fine_steps: u64,
    pub chunk_s: f64,
    pub hop_s: f64,
    pub fine_min_s: f64,
    pub fine_max_s: f64,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_classes: 8,
            k_samples: 4,
            coarse_steps: 1000,
            fine_steps: 1000,
            chunk_s: 15.0,
            hop_s: 7.5,
            fine_min_s: 15.0,
            fine_max_s: 45.0,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 64 classes x 4 samples.
    pub fn paper() -> Self {
        Self {
            p_classes: 64,
            ..Self::default()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.p_classes * self.k_samples
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.p_classes < 2 || self.k_samples < 2 {
            return Err("batches need at least 2 classes with 2 samples each".into());
        }
        if !(self.chunk_s > 0.0 && self.hop_s > 0.0 && self.hop_s <= self.chunk_s) {
            return Err(format!("chunking {} s / {} s invalid", self.chunk_s, self.hop_s));
        }
        if !(self.fine_min_s > 0.0 && self.fine_min_s <= self.fine_max_s) {
            return Err(format!("fine crop range [{}, {}] invalid", self.fine_min_s, self.fine_max_s));
        }
        if !(self.lr.base > 0.0) {
            return Err("learning rate must be positive".into());
        }
        Ok(())
    }
}

/// Everything a training run needs besides data.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub encoder: Encoder,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.encoder.validate().map_err(TrainError::Config)?;
        self.loss.validate().map_err(TrainError::Config)?;
        self.augment.validate().map_err(TrainError::Config)?;
        self.train.validate().map_err(TrainError::Config)
    }
}

#[derive(Debug, Clone)]
pub struct TrainTrack {
    pub track_id: String,
    pub work_id: String,
    pub class: usize,
    pub feature: CqtFeature,
}

/// Training-split tracks with work labels mapped to class indices in
/// first-appearance order.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub tracks: Vec<TrainTrack>,
    pub classes: Vec<String>,
}

impl TrainingSet {
    /// Loads the features of every training-split record; test-split records
    /// are never passed to `load`.
    pub fn from_manifest<E>(
        manifest: &Manifest,
        mut load: impl FnMut(&ManifestRecord) -> Result<CqtFeature, E>,
    ) -> Result<Self, E> {
        let mut set = TrainingSet::default();
        for rec in manifest.split(Split::Train) {
            let feature = load(rec)?;
            set.push(&rec.track_id, &rec.work_id, feature);
        }
        Ok(set)
    }

    pub fn push(&mut self, track_id: &str, work_id: &str, feature: CqtFeature) {
        let class = match self.classes.iter().position(|w| w == work_id) {
            Some(c) => c,
            None => {
                self.classes.push(work_id.to_string());
                self.classes.len() - 1
            }
        };
        self.tracks.push(TrainTrack {
            track_id: track_id.to_string(),
            work_id: work_id.to_string(),
            class,
            feature,
        });
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn frame_rate(&self) -> Option<f32> {
        self.tracks.first().map(|t| t.feature.frame_rate)
    }

    fn bins(&self) -> usize {
        self.tracks.first().map_or(0, |t| t.feature.bins)
    }

    fn index_of(&self, track_id: &str) -> Option<usize> {
        self.tracks.iter().position(|t| t.track_id == track_id)
    }
}

/// Trainable parameters, BatchNorm statistics and class centers.
pub struct ModelState {
    pub store: ParamStore<f32>,
    pub centers: CenterBank<f32>,
}

impl ModelState {
    pub fn init(encoder: &Encoder, seed: u64) -> Result<Self, TrainError> {
        let mut rng = Rng::seed_from_u64(seed);
        Ok(Self {
            store: encoder.init(&mut rng)?,
            centers: CenterBank::new(encoder.cfg.n_classes, encoder.cfg.bottleneck_dim),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = self.store.entries();
        entries.push((CENTERS_KEY.to_string(), self.centers.centers.clone()));
        Checkpoint { entries }
    }

    /// Rebuilds the state of `encoder` from a checkpoint; optimizer moments
    /// start from zero.
    pub fn from_checkpoint(encoder: &Encoder, ck: &Checkpoint) -> Result<Self, TrainError> {
        let mut state = Self::init(encoder, 0)?;
        state
            .store
            .load_entries(&ck.entries)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let centers = ck
            .get(CENTERS_KEY)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing {CENTERS_KEY}")))?;
        if centers.shape() != state.centers.centers.shape() {
            return Err(TrainError::Checkpoint(format!("{CENTERS_KEY} has shape {:?}", centers.shape())));
        }
        state.centers.centers = centers.clone();
        Ok(state)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub focal: f64,
    pub center: f64,
    pub triplet: f64,
    pub total: f64,
}

/// Tab-separated log with a header line.
pub fn log_to_tsv(records: &[LogRecord]) -> String {
    let mut s = String::from("step\tlr\tfocal\tcenter\ttriplet\ttotal\n");
    for r in records {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.step, r.lr, r.focal, r.center, r.triplet, r.total
        ));
    }
    s
}

/// Where one batch sample was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSource {
    pub track: usize,
    pub start_frame: usize,
    /// Frames taken from the track before padding.
    pub frames: usize,
    /// Alignment-table row of a fine-stage sample.
    pub row: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, L, F]`
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub sources: Vec<SampleSource>,
}

#[derive(Debug, Clone, Copy)]
struct Span {
    track: usize,
    start_frame: usize,
    frames: usize,
    row: Option<usize>,
}

enum Pool {
    /// Fixed chunks per class.
    Chunks { by_class: Vec<Vec<Span>>, frames: usize },
    /// Aligned row pairs per class.
    Aligned { by_class: Vec<Vec<usize>>, rows: Vec<(usize, f64, usize, f64)> },
}

/// Class-balanced batch sampler: `P` classes, `K` samples each.
pub struct Sampler {
    pool: Pool,
    p: usize,
    k: usize,
    fine_range_s: [f64; 2],
    frame_rate: f64,
    bins: usize,
}

impl Sampler {
    /// Every `chunk_s` / `hop_s` chunk of every track, labeled with its work.
    pub fn coarse(set: &TrainingSet, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let fr = set.frame_rate().ok_or(TrainError::EmptyCorpus)? as f64;
        let mut by_class = vec![Vec::new(); set.n_classes()];
        for (i, t) in set.tracks.iter().enumerate() {
            for c in chunk_feature(&t.feature, cfg.chunk_s, cfg.hop_s) {
                by_class[t.class].push(Span {
                    track: i,
                    start_frame: c.start_frame,
                    frames: c.n_frames,
                    row: None,
                });
            }
        }
        if by_class.iter().all(Vec::is_empty) {
            return Err(TrainError::EmptyCorpus);
        }
        Ok(Self {
            pool: Pool::Chunks {
                by_class,
                frames: (cfg.chunk_s * fr).round() as usize,
            },
            p: cfg.p_classes,
            k: cfg.k_samples,
            fine_range_s: [cfg.fine_min_s, cfg.fine_max_s],
            frame_rate: fr,
            bins: set.bins(),
        })
    }

    /// Aligned pairs of `table` whose tracks are both in `set`, grouped by
    /// class. Each pair contributes its two crops as positives.
    pub fn fine(set: &TrainingSet, table: &AlignmentTable, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let fr = set.frame_rate().ok_or(TrainError::EmptyCorpus)? as f64;
        let mut by_class = vec![Vec::new(); set.n_classes()];
        let mut rows = Vec::with_capacity(table.rows.len());
        for (i, r) in table.rows.iter().enumerate() {
            let (Some(a), Some(b)) = (set.index_of(&r.track_a), set.index_of(&r.track_b)) else {
                rows.push((usize::MAX, 0.0, usize::MAX, 0.0));
                continue;
            };
            rows.push((a, r.start_a_s, b, r.start_b_s));
            if set.tracks[a].class == set.tracks[b].class {
                by_class[set.tracks[a].class].push(i);
            }
        }
        if by_class.iter().filter(|c| !c.is_empty()).count() < 2 {
            return Err(TrainError::EmptyAlignmentTable);
        }
        Ok(Self {
            pool: Pool::Aligned { by_class, rows },
            p: cfg.p_classes,
            k: cfg.k_samples,
            fine_range_s: [cfg.fine_min_s, cfg.fine_max_s],
            frame_rate: fr,
            bins: set.bins(),
        })
    }

    /// Per-class sample counts, for the focal weights.
    pub fn class_counts(&self) -> Vec<usize> {
        match &self.pool {
            Pool::Chunks { by_class, .. } => by_class.iter().map(Vec::len).collect(),
            Pool::Aligned { by_class, .. } => by_class.iter().map(|c| 2 * c.len()).collect(),
        }
    }

    fn pick_classes(&self, sizes: impl Iterator<Item = usize>, rng: &mut Rng) -> Vec<usize> {
        let avail: Vec<usize> = sizes.enumerate().filter(|(_, n)| *n > 0).map(|(c, _)| c).collect();
        let mut chosen: Vec<usize> = avail.choose_multiple(rng, self.p.min(avail.len())).copied().collect();
        chosen.sort_unstable();
        chosen
    }

    fn pick<T: Copy>(items: &[T], n: usize, rng: &mut Rng) -> Vec<T> {
        if items.len() >= n {
            items.choose_multiple(rng, n).copied().collect()
        } else {
            (0..n).map(|_| *items.choose(rng).expect("non-empty class")).collect()
        }
    }

    /// Draws the spans of one batch and its crop length in frames.
    fn draw(&self, set: &TrainingSet, rng: &mut Rng) -> (Vec<(usize, Span)>, usize) {
        match &self.pool {
            Pool::Chunks { by_class, frames } => {
                let mut out = Vec::new();
                for c in self.pick_classes(by_class.iter().map(Vec::len), rng) {
                    for s in Self::pick(&by_class[c], self.k, rng) {
                        out.push((c, s));
                    }
                }
                (out, *frames)
            }
            Pool::Aligned { by_class, rows } => {
                let [lo, hi] = self.fine_range_s;
                let len_s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                let frames = (len_s * self.frame_rate).round() as usize;
                let mut out = Vec::new();
                for c in self.pick_classes(by_class.iter().map(Vec::len), rng) {
                    let n_pairs = self.k.div_ceil(2);
                    let mut taken = 0;
                    for ri in Self::pick(&by_class[c], n_pairs, rng) {
                        let (a, sa, b, sb) = rows[ri];
                        let (ta, tb) = (&set.tracks[a], &set.tracks[b]);
                        let pair = crate::align::AlignedPair {
                            track_a: ta.track_id.clone(),
                            track_b: tb.track_id.clone(),
                            start_a_s: sa,
                            start_b_s: sb,
                            delta: 0,
                            n_support_pairs: 0,
                        };
                        let crops = extend_with_length(&pair, len_s, ta.feature.duration_s(), tb.feature.duration_s());
                        for (track, crop) in [(a, &crops[0]), (b, &crops[1])] {
                            if taken == self.k {
                                break;
                            }
                            let start_frame = (crop.start_s * self.frame_rate).round() as usize;
                            let n = set.tracks[track].feature.n_frames;
                            let take = ((crop.length_s * self.frame_rate).round() as usize)
                                .min(frames)
                                .min(n.saturating_sub(start_frame));
                            out.push((
                                c,
                                Span {
                                    track,
                                    start_frame,
                                    frames: take,
                                    row: Some(ri),
                                },
                            ));
                            taken += 1;
                        }
                    }
                }
                (out, frames)
            }
        }
    }

    /// Cuts, augments and stacks one batch. All crops are padded with the
    /// log floor (or cut) to the batch length.
    pub fn next_batch(&self, set: &TrainingSet, augment: &AugmentConfig, rng: &mut Rng) -> Batch {
        let (spans, frames) = self.draw(set, rng);
        let frames = frames.max(DOWNSAMPLE_FACTOR);
        let f = self.bins;
        let mut x = Vec::with_capacity(spans.len() * frames * f);
        let mut labels = Vec::with_capacity(spans.len());
        let mut sources = Vec::with_capacity(spans.len());
        for (class, s) in spans {
            let src = &set.tracks[s.track].feature;
            let mut crop = src.slice_frames(s.start_frame, s.frames.min(frames));
            crop.resize(frames * f, crate::audio::LOG_FLOOR);
            let feat = CqtFeature {
                frames: crop,
                n_frames: frames,
                bins: f,
                frame_rate: src.frame_rate,
                bins_per_octave: src.bins_per_octave,
                f_min: src.f_min,
                track_id: String::new(),
            };
            x.extend_from_slice(&augment_feature(&feat, augment, rng).frames);
            labels.push(class);
            sources.push(SampleSource {
                track: s.track,
                start_frame: s.start_frame,
                frames: s.frames.min(frames),
                row: s.row,
            });
        }
        let b = labels.len();
        Batch {
            x: Tensor::new(vec![b, frames, f], x).expect("batch shape"),
            labels,
            sources,
        }
    }
}

/// A training run over one sampler. Parameters, optimizer moments, centers
/// and every random stream live here, so stepping is resumable.
pub struct Trainer<'a> {
    pub setup: &'a TrainSetup,
    pub set: &'a TrainingSet,
    pub state: ModelState,
    pub log: Vec<LogRecord>,
    sampler: Sampler,
    alpha: Vec<f64>,
    data_rng: Rng,
    model_rng: Rng,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(setup: &'a TrainSetup, set: &'a TrainingSet, state: ModelState, sampler: Sampler, stream: u64) -> Result<Self, TrainError> {
        setup.validate()?;
        if set.n_classes() != setup.encoder.cfg.n_classes {
            return Err(TrainError::Config(format!(
                "{} training works but the classifier has {} classes",
                set.n_classes(),
                setup.encoder.cfg.n_classes
            )));
        }
        if set.bins() != setup.encoder.cfg.input_bins {
            return Err(TrainError::Config(format!(
                "features have {} bins, encoder expects {}",
                set.bins(),
                setup.encoder.cfg.input_bins
            )));
        }
        let alpha = setup.loss.class_weights(&sampler.class_counts())?;
        let mut data_rng = Rng::seed_from_u64(setup.train.seed);
        data_rng.set_stream(2 * stream + 1);
        let mut model_rng = Rng::seed_from_u64(setup.train.seed);
        model_rng.set_stream(2 * stream + 2);
        Ok(Self {
            setup,
            set,
            state,
            log: Vec::new(),
            sampler,
            alpha,
            data_rng,
            model_rng,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    /// One optimization step on a fresh batch.
    pub fn step(&mut self) -> Result<LogRecord, TrainError> {
        let batch = self.sampler.next_batch(self.set, &self.setup.augment, &mut self.data_rng);
        self.step_on(batch)
    }

    /// One optimization step on a given batch.
    pub fn step_on(&mut self, batch: Batch) -> Result<LogRecord, TrainError> {
        let step = self.step;
        let lr = self.setup.train.lr.at(step);
        let loss = &self.setup.loss;
        let diverged = |reason: String| TrainError::Divergence { step, reason };
        let labels = batch.labels;
        let (parts, post) = {
            let mut s = Session::new(&mut self.state.store, true, &mut self.model_rng);
            let x = s.input(batch.x);
            let o = self.setup.encoder.forward(&mut s, x)?;
            let nonfinite = |e: LossError| match e {
                LossError::NonFiniteValue(what) => diverged(format!("{what} loss is not finite")),
                other => other.into(),
            };
            let f = focal_loss(&mut s.graph, o.logits, &labels, &self.alpha, loss.gamma).map_err(nonfinite)?;
            let c = center_loss(&mut s.graph, o.post_bottleneck, &labels, &self.state.centers).map_err(nonfinite)?;
            let (t, stats) =
                triplet_loss(&mut s.graph, o.pre_bottleneck, &labels, loss.triplet_margin, loss.triplet_distance).map_err(nonfinite)?;
            if stats.degenerate {
                log::warn!("step {step}: no valid triplet anchors in batch");
            }
            let parts = LossParts {
                focal: s.value(f).item() as f64,
                center: s.value(c).item() as f64,
                triplet: s.value(t).item() as f64,
            };
            let total = total_loss(&mut s.graph, f, c, t, loss).map_err(nonfinite)?;
            let post = s.value(o.post_bottleneck).clone();
            s.backward(total)?;
            (parts, post)
        };
        let total = parts.total(loss).map_err(|e| diverged(e.to_string()))?;
        self.state.store.adam_step(lr, &self.setup.train.adam)?;
        if self.state.store.entries().iter().any(|(_, t)| !t.all_finite()) {
            return Err(diverged("parameters became non-finite".into()));
        }
        self.state.centers.update(&post, &labels, loss.center_lr)?;
        let rec = LogRecord {
            step,
            lr,
            focal: parts.focal,
            center: parts.center,
            triplet: parts.triplet,
            total,
        };
        self.log.push(rec);
        self.step += 1;
        Ok(rec)
    }

    pub fn run(&mut self, steps: u64) -> Result<(), TrainError> {
        for _ in 0..steps {
            let r = self.step()?;
            if r.step % 50 == 0 {
                log::info!(
                    "step {} lr {:.2e} focal {:.4} center {:.4} triplet {:.4} total {:.4}",
                    r.step,
                    r.lr,
                    r.focal,
                    r.center,
                    r.triplet,
                    r.total
                );
            }
        }
        Ok(())
    }
}

/// Result of a training stage.
pub struct Trained {
    pub state: ModelState,
    pub log: Vec<LogRecord>,
}

/// Trains from a fresh initialization on fixed chunks labeled by work.
pub fn train_coarse(setup: &TrainSetup, set: &TrainingSet) -> Result<Trained, TrainError> {
    if set.tracks.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let state = ModelState::init(&setup.encoder, setup.train.seed)?;
    let sampler = Sampler::coarse(set, &setup.train)?;
    let mut t = Trainer::new(setup, set, state, sampler, 0)?;
    t.run(setup.train.coarse_steps)?;
    Ok(Trained { state: t.state, log: t.log })
}

/// Continues from the coarse checkpoint on aligned crops.
pub fn train_fine(setup: &TrainSetup, coarse: &Checkpoint, table: &AlignmentTable, set: &TrainingSet) -> Result<Trained, TrainError> {
    if table.rows.is_empty() {
        return Err(TrainError::EmptyAlignmentTable);
    }
    let state = ModelState::from_checkpoint(&setup.encoder, coarse)?;
    let sampler = Sampler::fine(set, table, &setup.train)?;
    let mut t = Trainer::new(setup, set, state, sampler, 1)?;
    t.run(setup.train.fine_steps)?;
    Ok(Trained { state: t.state, log: t.log })
}

/// Eval-mode, unit-length embeddings of every `chunk_s` / `hop_s` chunk of
/// `feat`. Chunks shorter than the downsampler's minimum are skipped.
pub fn embed_track(
    encoder: &Encoder,
    store: &mut ParamStore<f32>,
    feat: &CqtFeature,
    work_id: &str,
    chunk_s: f64,
    hop_s: f64,
    source: EmbeddingSource,
) -> Result<Vec<ChunkEmbedding>, TrainError> {
    let chunks = chunk_feature(feat, chunk_s, hop_s);
    let mut by_len: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, c) in chunks.iter().enumerate() {
        if c.n_frames >= DOWNSAMPLE_FACTOR {
            by_len.entry(c.n_frames).or_default().push(i);
        }
    }
    let mut vectors: Vec<Option<Vec<f32>>> = vec![None; chunks.len()];
    let mut lens: Vec<usize> = by_len.keys().copied().collect();
    lens.sort_unstable();
    for len in lens {
        let idx = &by_len[&len];
        let data: Vec<&[f32]> = idx.iter().map(|&i| chunks[i].frames.as_slice()).collect();
        let out = encoder.embed(store, &data, len, 16)?;
        for (&i, e) in idx.iter().zip(out) {
            let v = normalize(e.select(source))
                .map_err(|_| TrainError::Divergence { step: 0, reason: format!("zero embedding for {}", feat.track_id) })?;
            vectors[i] = Some(v);
        }
    }
    Ok(chunks
        .iter()
        .zip(vectors)
        .enumerate()
        .filter_map(|(i, (c, v))| {
            v.map(|vector| ChunkEmbedding {
                track_id: feat.track_id.clone(),
                work_id: work_id.to_string(),
                chunk_index: i as u32 + 1,
                start_s: c.start_s,
                vector,
            })
        })
        .collect())
}

/// Embeds every training track with the coarse model and aligns every
/// same-work pair.
pub fn run_alignment(
    encoder: &Encoder,
    checkpoint: &Checkpoint,
    set: &TrainingSet,
    cfg: &AlignConfig,
) -> Result<AlignmentTable, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    let mut state = ModelState::from_checkpoint(encoder, checkpoint)?;
    let mut embs = Vec::new();
    for t in &set.tracks {
        embs.extend(embed_track(encoder, &mut state.store, &t.feature, &t.work_id, cfg.chunk_s, cfg.hop_s, cfg.embedding)?);
    }
    Ok(build_alignment_table(&embs, cfg.threshold, cfg.hop_s))
}
