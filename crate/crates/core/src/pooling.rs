//! Attentive statistics pooling over time.
//!
//! `[B, T, D]` frames are concatenated with their time mean and std
//! (`[B, T, 3D]`), randomly erased in training, passed through multi-head
//! self-attention without positional encoding, summarized again by mean and
//! std (`[B, 6D]`) and projected back to `D`.

use serde::{Deserialize, Serialize};

use crate::nn::attention::init_attention;
use crate::nn::session::init_linear;
use crate::nn::{multi_head_self_attention, NnError, ParamStore, Rng, Session, Var};
use crate::scalar::Scalar;

pub const STD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolingConfig {
    /// Element erase probability on the attention input (training only).
    pub mask_prob: f64,
    pub heads: usize,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self { mask_prob: 0.1, heads: 4 }
    }
}

impl PoolingConfig {
    pub fn validate(&self, dim: usize) -> Result<(), String> {
        if !(0.0..=0.5).contains(&self.mask_prob) {
            return Err(format!("pooling mask_prob {} outside [0, 0.5]", self.mask_prob));
        }
        if self.heads == 0 || (3 * dim) % self.heads != 0 {
            return Err(format!("pooling width {} not divisible by {} heads", 3 * dim, self.heads));
        }
        Ok(())
    }
}

pub fn init_pooling<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut Rng) -> Result<(), NnError> {
    init_attention(store, &format!("{prefix}.attn"), 3 * dim, rng)?;
    init_linear(store, &format!("{prefix}.proj"), 6 * dim, dim, rng)
}

/// Pools `x: [B, T, D]` to `[B, D]`.
pub fn time_pool<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x: Var, cfg: &PoolingConfig) -> Result<Var, NnError> {
    let shape = s.graph.shape(x).to_vec();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(NnError::ShapeMismatch(format!("time pooling needs [B, T >= 1, D], got {shape:?}")));
    }
    let t = shape[1];
    let mu = s.graph.mean(x, 1)?;
    let sigma = s.graph.std(x, 1, STD_EPS)?;
    let mu = s.graph.expand(mu, 1, t)?;
    let sigma = s.graph.expand(sigma, 1, t)?;
    let h = s.graph.concat(&[x, mu, sigma], 2)?;
    let h = s.dropout(h, cfg.mask_prob)?;
    let a = multi_head_self_attention(s, &format!("{prefix}.attn"), h, cfg.heads, None)?.output;
    let am = s.graph.mean(a, 1)?;
    let asd = s.graph.std(a, 1, STD_EPS)?;
    let stats = s.graph.concat(&[am, asd], 1)?;
    s.linear(stats, &format!("{prefix}.proj"))
}
