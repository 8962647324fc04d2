use crate::scalar::Scalar;

use super::session::init_linear;
use super::{NnError, ParamStore, Rng, Session, Var};

pub struct AttentionOutput {
    pub output: Var,
    /// Attention weights, `[B * heads, T, T]`.
    pub weights: Var,
}

pub(crate) fn init_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    rng: &mut Rng,
) -> Result<(), NnError> {
    for p in ["q", "k", "v", "out"] {
        init_linear(store, &format!("{prefix}.{p}"), dim, dim, rng)?;
    }
    Ok(())
}

/// Scaled dot-product self-attention over `x: [B, T, D]` with `heads` heads.
///
/// `mask` is a `T x T` boolean plane (`true` = key hidden from query) shared
/// by every batch element and head.
pub fn multi_head_self_attention<T: Scalar>(
    s: &mut Session<'_, T>,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput, NnError> {
    let shape = s.graph.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(NnError::ShapeMismatch(format!("attention input must be [B, T, D], got {shape:?}")));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(NnError::ShapeMismatch(format!("model dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |s: &mut Session<'_, T>, v: Var| -> Result<Var, NnError> {
        let v = s.graph.reshape(v, &[b, t, heads, dh])?;
        let v = s.graph.permute(v, &[0, 2, 1, 3])?;
        s.graph.reshape(v, &[b * heads, t, dh])
    };
    let q = s.linear(x, &format!("{prefix}.q"))?;
    let k = s.linear(x, &format!("{prefix}.k"))?;
    let v = s.linear(x, &format!("{prefix}.v"))?;
    let (q, k, v) = (split(s, q)?, split(s, k)?, split(s, v)?);
    let scores = s.graph.matmul_t(q, k)?;
    let scores = s.graph.scale(scores, T::from_f64_lossy(1.0 / (dh as f64).sqrt()))?;
    let weights = s.graph.softmax(scores, mask)?;
    let ctx = s.graph.matmul(weights, v)?;
    let ctx = s.graph.reshape(ctx, &[b, heads, t, dh])?;
    let ctx = s.graph.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = s.graph.reshape(ctx, &[b, t, d])?;
    let output = s.linear(ctx, &format!("{prefix}.out"))?;
    Ok(AttentionOutput { output, weights })
}
