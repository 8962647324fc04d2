//! The full network: input BatchNorm, x4 convolutional downsampler,
//! Conformer blocks, attentive time pooling, linear bottleneck and a linear
//! classifier head.
//!
//! Tensors are laid out `[B, T, C]`. Parameter names are hierarchical
//! (`block0.conv.pw1.w`), which is also how they appear in checkpoints.

use serde::{Deserialize, Serialize};

use crate::nn::attention::init_attention;
use crate::nn::session::{init_batch_norm, init_layer_norm, init_linear};
use crate::nn::{multi_head_self_attention, NnError, ParamStore, Rng, Session, Tensor, Var};
use crate::pooling::{init_pooling, time_pool, PoolingConfig};
use crate::scalar::Scalar;

pub const DOWNSAMPLE_FACTOR: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("input of {frames} frames is shorter than the {min} the downsampler needs")]
    TooShort { frames: usize, min: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_bins: usize,
    pub n_blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ff_expansion: usize,
    pub bottleneck_dim: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub downsample_factor: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy(8)
    }
}

impl EncoderConfig {
    /// Two blocks of width 64, bottleneck 32.
    pub fn toy(n_classes: usize) -> Self {
        Self {
            input_bins: 96,
            n_blocks: 2,
            model_dim: 64,
            heads: 4,
            conv_kernel: 15,
            ff_expansion: 4,
            bottleneck_dim: 32,
            n_classes,
            dropout: 0.1,
            downsample_factor: DOWNSAMPLE_FACTOR,
        }
    }

    /// Six blocks of width 256 with a 128-d bottleneck.
    pub fn paper_128(n_classes: usize) -> Self {
        Self {
            n_blocks: 6,
            model_dim: 256,
            bottleneck_dim: 128,
            ..Self::toy(n_classes)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.downsample_factor != DOWNSAMPLE_FACTOR {
            return Err(format!("downsample_factor must be {DOWNSAMPLE_FACTOR}"));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads));
        }
        if self.conv_kernel % 2 == 0 {
            return Err("conv_kernel must be odd".into());
        }
        if self.input_bins == 0 || self.bottleneck_dim == 0 || self.n_classes == 0 || self.ff_expansion == 0 {
            return Err("encoder dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Output length of one kernel-3, stride-2, pad-1 convolution.
pub fn downsampled_len(t: usize) -> usize {
    t.div_ceil(2)
}

/// Sinusoidal absolute position table `[t, d]`.
pub fn positional_encoding<T: Scalar>(t: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(t * d);
    for pos in 0..t {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * rate;
            data.push(T::from_f64_lossy(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(vec![t, d], data).expect("consistent positional table")
}

/// Everything the losses and retrieval need from one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// Pooled representation `[B, model_dim]`.
    pub pre_bottleneck: Var,
    /// Bottleneck output `[B, bottleneck_dim]`.
    pub post_bottleneck: Var,
    /// Unit-normalized `post_bottleneck`, the retrieval embedding.
    pub embedding: Var,
    pub logits: Var,
}

/// Per-sample vectors of [`ModelOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub pre_bottleneck: Vec<f32>,
    pub post_bottleneck: Vec<f32>,
}

impl EmbeddingPair {
    pub fn select(&self, source: EmbeddingSource) -> &[f32] {
        match source {
            EmbeddingSource::PostBottleneck => &self.post_bottleneck,
            EmbeddingSource::PreBottleneck => &self.pre_bottleneck,
        }
    }
}

/// Which pooled vector is indexed and aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    #[default]
    PostBottleneck,
    PreBottleneck,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub pooling: PoolingConfig,
}

fn init_conv<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Result<(), NnError> {
    store.add_xavier(&format!("{prefix}.w"), &[cout, cin, k], cin * k, cout * k, rng)?;
    store.add_param(&format!("{prefix}.b"), Tensor::zeros(&[cout]))
}

fn init_ff<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, e: usize, rng: &mut Rng) -> Result<(), NnError> {
    init_layer_norm(store, &format!("{prefix}.ln"), d)?;
    init_linear(store, &format!("{prefix}.l1"), d, d * e, rng)?;
    init_linear(store, &format!("{prefix}.l2"), d * e, d, rng)
}

/// Registers the parameters of one Conformer block under `prefix`.
pub fn init_conformer_block<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Result<(), NnError> {
    let d = cfg.model_dim;
    init_ff(store, &format!("{prefix}.ff1"), d, cfg.ff_expansion, rng)?;
    init_layer_norm(store, &format!("{prefix}.attn_ln"), d)?;
    init_attention(store, &format!("{prefix}.attn"), d, rng)?;
    init_layer_norm(store, &format!("{prefix}.conv.ln"), d)?;
    init_linear(store, &format!("{prefix}.conv.pw1"), d, 2 * d, rng)?;
    store.add_xavier(&format!("{prefix}.conv.dw.w"), &[d, cfg.conv_kernel], cfg.conv_kernel, cfg.conv_kernel, rng)?;
    store.add_param(&format!("{prefix}.conv.dw.b"), Tensor::zeros(&[d]))?;
    init_batch_norm(store, &format!("{prefix}.conv.bn"), d)?;
    init_linear(store, &format!("{prefix}.conv.pw2"), d, d, rng)?;
    init_ff(store, &format!("{prefix}.ff2"), d, cfg.ff_expansion, rng)?;
    init_layer_norm(store, &format!("{prefix}.final_ln"), d)
}

fn feed_forward<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x: Var, p: f64) -> Result<Var, NnError> {
    let h = s.layer_norm(x, &format!("{prefix}.ln"))?;
    let h = s.linear(h, &format!("{prefix}.l1"))?;
    let h = s.graph.swish(h)?;
    let h = s.dropout(h, p)?;
    let h = s.linear(h, &format!("{prefix}.l2"))?;
    s.dropout(h, p)
}

fn conv_module<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x: Var, cfg: &EncoderConfig) -> Result<Var, NnError> {
    let h = s.layer_norm(x, &format!("{prefix}.ln"))?;
    let h = s.linear(h, &format!("{prefix}.pw1"))?;
    let h = s.graph.glu(h)?;
    let w = s.param(&format!("{prefix}.dw.w"))?;
    let b = s.param(&format!("{prefix}.dw.b"))?;
    let h = s.graph.depthwise_conv1d(h, w, cfg.conv_kernel / 2)?;
    let h = s.graph.add(h, b)?;
    let h = s.batch_norm(h, &format!("{prefix}.bn"))?;
    let h = s.graph.swish(h)?;
    let h = s.linear(h, &format!("{prefix}.pw2"))?;
    s.dropout(h, cfg.dropout)
}

/// `x + 0.5 FF(x)`, `+ MHSA`, `+ Conv`, `+ 0.5 FF`, then layer norm; every
/// sublayer is pre-normalized.
pub fn conformer_block<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x: Var, cfg: &EncoderConfig) -> Result<Var, NnError> {
    let half = T::from_f64_lossy(0.5);
    let f = feed_forward(s, &format!("{prefix}.ff1"), x, cfg.dropout)?;
    let f = s.graph.scale(f, half)?;
    let x = s.graph.add(x, f)?;

    let h = s.layer_norm(x, &format!("{prefix}.attn_ln"))?;
    let a = multi_head_self_attention(s, &format!("{prefix}.attn"), h, cfg.heads, None)?.output;
    let a = s.dropout(a, cfg.dropout)?;
    let x = s.graph.add(x, a)?;

    let c = conv_module(s, &format!("{prefix}.conv"), x, cfg)?;
    let x = s.graph.add(x, c)?;

    let f = feed_forward(s, &format!("{prefix}.ff2"), x, cfg.dropout)?;
    let f = s.graph.scale(f, half)?;
    let x = s.graph.add(x, f)?;
    s.layer_norm(x, &format!("{prefix}.final_ln"))
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, pooling: PoolingConfig) -> Self {
        Self { cfg, pooling }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.cfg.validate()?;
        self.pooling.validate(self.cfg.model_dim)
    }

    /// Fresh parameters: Xavier-uniform weights, zero biases, unit norms.
    pub fn init<T: Scalar>(&self, rng: &mut Rng) -> Result<ParamStore<T>, NnError> {
        let c = &self.cfg;
        let d = c.model_dim;
        let mut store = ParamStore::new();
        init_batch_norm(&mut store, "input_bn", c.input_bins)?;
        init_conv(&mut store, "down1", c.input_bins, d, 3, rng)?;
        init_conv(&mut store, "down2", d, d, 3, rng)?;
        for i in 0..c.n_blocks {
            init_conformer_block(&mut store, &format!("block{i}"), c, rng)?;
        }
        init_pooling(&mut store, "pool", d, rng)?;
        init_linear(&mut store, "bottleneck", d, c.bottleneck_dim, rng)?;
        init_linear(&mut store, "classifier", c.bottleneck_dim, c.n_classes, rng)?;
        Ok(store)
    }

    /// `[B, T, F]` to `[B, ceil(ceil(T/2)/2), model_dim]`.
    pub fn downsample<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, ModelError> {
        let t = s.graph.shape(x).get(1).copied().unwrap_or(0);
        if t < DOWNSAMPLE_FACTOR {
            return Err(ModelError::TooShort { frames: t, min: DOWNSAMPLE_FACTOR });
        }
        let mut h = x;
        for name in ["down1", "down2"] {
            let w = s.param(&format!("{name}.w"))?;
            let b = s.param(&format!("{name}.b"))?;
            h = s.graph.conv1d(h, w, 2, 1)?;
            h = s.graph.add(h, b)?;
            h = s.graph.swish(h)?;
        }
        Ok(h)
    }

    /// Forward pass on `x: [B, T, input_bins]`. Training mode (dropout,
    /// pooling mask, BatchNorm batch statistics) follows the session.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<ModelOutput, ModelError> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.input_bins {
            return Err(NnError::ShapeMismatch(format!(
                "encoder input must be [B, T, {}], got {shape:?}",
                self.cfg.input_bins
            ))
            .into());
        }
        if shape[1] < DOWNSAMPLE_FACTOR {
            return Err(ModelError::TooShort { frames: shape[1], min: DOWNSAMPLE_FACTOR });
        }
        let h = s.batch_norm(x, "input_bn")?;
        let h = self.downsample(s, h)?;
        let t = s.graph.shape(h)[1];
        let pe = s.input(positional_encoding(t, self.cfg.model_dim));
        let mut h = s.graph.add(h, pe)?;
        for i in 0..self.cfg.n_blocks {
            h = conformer_block(s, &format!("block{i}"), h, &self.cfg)?;
        }
        let pre_bottleneck = time_pool(s, "pool", h, &self.pooling)?;
        let post_bottleneck = s.linear(pre_bottleneck, "bottleneck")?;
        let embedding = s.graph.l2_normalize(post_bottleneck)?;
        let logits = s.linear(post_bottleneck, "classifier")?;
        Ok(ModelOutput {
            pre_bottleneck,
            post_bottleneck,
            embedding,
            logits,
        })
    }

    /// Eval-mode embeddings of equally long chunks, each `T x input_bins`
    /// row-major, processed `batch` at a time.
    pub fn embed(&self, store: &mut ParamStore<f32>, chunks: &[&[f32]], frames: usize, batch: usize) -> Result<Vec<EmbeddingPair>, ModelError> {
        let f = self.cfg.input_bins;
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut out = Vec::with_capacity(chunks.len());
        for group in chunks.chunks(batch.max(1)) {
            let mut data = Vec::with_capacity(group.len() * frames * f);
            for c in group {
                if c.len() != frames * f {
                    return Err(NnError::ShapeMismatch(format!("chunk of {} values, expected {}", c.len(), frames * f)).into());
                }
                data.extend_from_slice(c);
            }
            let mut s = Session::new(store, false, &mut rng);
            let x = s.input(Tensor::new(vec![group.len(), frames, f], data)?);
            let o = self.forward(&mut s, x)?;
            let pre = s.value(o.pre_bottleneck).clone();
            let post = s.value(o.post_bottleneck).clone();
            for i in 0..group.len() {
                out.push(EmbeddingPair {
                    pre_bottleneck: pre.row(i).to_vec(),
                    post_bottleneck: post.row(i).to_vec(),
                });
            }
        }
        Ok(out)
    }
}
