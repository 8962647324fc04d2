//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so reversing the
//! node list is a valid topological order for the backward sweep.

use crate::scalar::Scalar;

use super::tensor::{strides, Tensor};
use super::NnError;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Distance used by the batch-hard triplet term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletDistance {
    Euclidean,
    Cosine,
}

/// Bookkeeping returned alongside the triplet loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletStats {
    pub valid_anchors: usize,
    /// No anchor had both a positive and a negative; the loss is 0.
    pub degenerate: bool,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool, batched: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T>, train: bool },
    Conv1d { x: Var, w: Var, stride: usize, pad: usize, cols: Vec<T> },
    DepthwiseConv1d { x: Var, w: Var, pad: usize },
    Glu { x: Var },
    Swish { x: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Concat { inputs: Vec<Var>, axis: usize },
    Mean { x: Var, axis: usize },
    Std { x: Var, axis: usize, mean: Vec<T> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    Expand { x: Var, axis: usize, n: usize },
    SumAll { x: Var },
    L2Normalize { x: Var, norms: Vec<T> },
    /// Fused loss with its gradient w.r.t. `x` precomputed in the forward pass.
    FusedLoss { x: Var, local_grad: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm_1d",
            Op::Conv1d { .. } => "conv1d",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::Glu { .. } => "glu",
            Op::Swish { .. } => "swish",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Mean { .. } => "mean",
            Op::Std { .. } => "std",
            Op::Permute { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Expand { .. } => "expand",
            Op::SumAll { .. } => "sum",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::FusedLoss { .. } => "loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv1d { x, w, .. } | Op::DepthwiseConv1d { x, w, .. } => vec![*x, *w],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Scale { a, .. } | Op::Softmax { a } => vec![*a],
            Op::Glu { x }
            | Op::Swish { x }
            | Op::Sigmoid { x }
            | Op::Relu { x }
            | Op::Dropout { x, .. }
            | Op::Mean { x, .. }
            | Op::Std { x, .. }
            | Op::Permute { x, .. }
            | Op::Reshape { x }
            | Op::Expand { x, .. }
            | Op::SumAll { x }
            | Op::L2Normalize { x, .. }
            | Op::FusedLoss { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A differentiable computation recorded op by op.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Splits `shape` around `axis` into (outer, n, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    // stride in the input for each output axis
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = new_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src[ax];
            if idx[ax] < new_shape[ax] {
                break;
            }
            offset -= src[ax] * new_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, new_shape)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is accumulated by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, `None` when nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFiniteValue(op.name().to_string()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ------------------------------------------------------------------
    // forward ops
    // ------------------------------------------------------------------

    /// `a @ b`. With a rank-2 `b` the weight is shared across every leading
    /// dimension of `a`; otherwise both operands carry identical batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` over the last two dimensions.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(NnError::ShapeMismatch(format!("matmul needs rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(NnError::ShapeMismatch(format!("matmul inner dims {sa:?} x {sb:?} (tb={tb})")));
        }
        let batched = sb.len() > 2;
        if batched && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(NnError::ShapeMismatch(format!("matmul batch dims {sa:?} x {sb:?}")));
        }
        let lead: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); lead * m * n];
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        let ad = self.data(a);
        let bd = self.data(b);
        if batched {
            for i in 0..lead {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &bd[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        } else {
            T::gemm(lead * m, k, n, T::one(), ad, k as isize, 1, bd, rsb, csb, T::zero(), &mut out, n as isize, 1);
        }
        self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b, tb, batched })
    }

    fn broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if !is_suffix(self.shape(a), self.shape(b)) {
            return Err(NnError::ShapeMismatch(format!(
                "{what}: {:?} does not broadcast onto {:?}",
                self.shape(b),
                self.shape(a)
            )));
        }
        Ok(())
    }

    /// `a + b`; `b` may have a suffix shape of `a` and is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.broadcast_check(a, b, "add")?;
        let bd = self.data(b);
        let nb = bd.len();
        let out: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add { a, b })
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.broadcast_check(a, b, "mul")?;
        let bd = self.data(b);
        let nb = bd.len();
        let out: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * bd[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, NnError> {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale { a, c })
    }

    /// Softmax over the last axis. `mask` covers the trailing two dimensions
    /// (`true` = masked out) and is broadcast over the leading ones.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, NnError> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| NnError::ShapeMismatch("softmax of a scalar".into()))?;
        if let Some(m) = mask {
            let plane = if shape.len() >= 2 { d * shape[shape.len() - 2] } else { d };
            if m.len() != plane {
                return Err(NnError::ShapeMismatch(format!(
                    "softmax mask has {} entries, expected {plane}",
                    m.len()
                )));
            }
        }
        let x = self.data(a);
        let mut out = vec![T::zero(); x.len()];
        for (r, (row, orow)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let mrow = mask.map(|m| {
                let rows_per_plane = m.len() / d;
                let rr = r % rows_per_plane;
                &m[rr * d..(rr + 1) * d]
            });
            let keep = |j: usize| mrow.map_or(true, |m| !m[j]);
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                return Err(NnError::FullyMaskedRow(r));
            }
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - mx).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { a })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NnError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NnError::ShapeMismatch(format!("layer_norm affine params must be [{d}]")));
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize_lossy(d);
        let xd = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Batch normalization over the channel (last) axis; statistics are taken
    /// over every other axis.
    ///
    /// `running = None` selects training mode and returns the batch mean and
    /// unbiased variance so the caller can update its running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm_1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>), NnError> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NnError::ShapeMismatch(format!("batch_norm affine params must be [{c}]")));
        }
        let xd = self.data(x);
        let rows = xd.len() / c.max(1);
        if rows == 0 {
            return Err(NnError::ShapeMismatch("batch_norm over empty batch".into()));
        }
        let eps = T::from_f64_lossy(eps);
        let (mean, var, batch_stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(NnError::ShapeMismatch("batch_norm running stats".into()));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let n = T::from_usize_lossy(rows);
                let mut mean = vec![T::zero(); c];
                for row in xd.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![T::zero(); c];
                for row in xd.chunks(c) {
                    for j in 0..c {
                        let dv = row[j] - mean[j];
                        var[j] += dv * dv;
                    }
                }
                let unbiased: Vec<T> = var
                    .iter()
                    .map(|&v| if rows > 1 { v / T::from_usize_lossy(rows - 1) } else { v })
                    .collect();
                var.iter_mut().for_each(|v| *v /= n);
                (mean.clone(), var, Some((mean, unbiased)))
            }
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (r, row) in xd.chunks(c).enumerate() {
            for j in 0..c {
                let h = (row[j] - mean[j]) * rstd[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + bt[j];
            }
        }
        let train = batch_stats.is_some();
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train },
        )?;
        Ok((v, batch_stats))
    }

    /// 1-D convolution on `[B, T, Cin]` input with weight `[Cout, Cin, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] || stride == 0 {
            return Err(NnError::ShapeMismatch(format!("conv1d input {sx:?} weight {sw:?}")));
        }
        let (b, t, cin) = (sx[0], sx[1], sx[2]);
        let (cout, kk) = (sw[0], sw[2]);
        if t + 2 * pad < kk {
            return Err(NnError::ShapeMismatch(format!("conv1d input length {t} shorter than kernel {kk}")));
        }
        let tout = (t + 2 * pad - kk) / stride + 1;
        let ck = cin * kk;
        let xd = self.data(x);
        let mut cols = vec![T::zero(); b * tout * ck];
        for bi in 0..b {
            for to in 0..tout {
                let row = &mut cols[(bi * tout + to) * ck..(bi * tout + to + 1) * ck];
                for k in 0..kk {
                    let ti = (to * stride + k) as isize - pad as isize;
                    if ti < 0 || ti as usize >= t {
                        continue;
                    }
                    let src = &xd[(bi * t + ti as usize) * cin..(bi * t + ti as usize + 1) * cin];
                    for c in 0..cin {
                        row[c * kk + k] = src[c];
                    }
                }
            }
        }
        let mut out = vec![T::zero(); b * tout * cout];
        T::gemm(
            b * tout,
            ck,
            cout,
            T::one(),
            &cols,
            ck as isize,
            1,
            self.data(w),
            1,
            ck as isize,
            T::zero(),
            &mut out,
            cout as isize,
            1,
        );
        self.push(
            Tensor::new(vec![b, tout, cout], out)?,
            Op::Conv1d { x, w, stride, pad, cols },
        )
    }

    /// Depthwise 1-D convolution (stride 1, symmetric padding) on `[B, T, C]`
    /// with weight `[C, K]`; output keeps length `T + 2*pad - K + 1`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] {
            return Err(NnError::ShapeMismatch(format!("depthwise_conv1d input {sx:?} weight {sw:?}")));
        }
        let (b, t, c) = (sx[0], sx[1], sx[2]);
        let kk = sw[1];
        if t + 2 * pad < kk {
            return Err(NnError::ShapeMismatch("depthwise_conv1d input shorter than kernel".into()));
        }
        let tout = t + 2 * pad - kk + 1;
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![T::zero(); b * tout * c];
        for bi in 0..b {
            for to in 0..tout {
                let orow = &mut out[(bi * tout + to) * c..(bi * tout + to + 1) * c];
                for k in 0..kk {
                    let ti = (to + k) as isize - pad as isize;
                    if ti < 0 || ti as usize >= t {
                        continue;
                    }
                    let src = &xd[(bi * t + ti as usize) * c..(bi * t + ti as usize + 1) * c];
                    for ch in 0..c {
                        orow[ch] += wd[ch * kk + k] * src[ch];
                    }
                }
            }
        }
        self.push(Tensor::new(vec![b, tout, c], out)?, Op::DepthwiseConv1d { x, w, pad })
    }

    /// Gated linear unit over the last axis: `first_half * sigmoid(second_half)`.
    pub fn glu(&mut self, x: Var) -> Result<Var, NnError> {
        let mut shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d % 2 != 0 {
            return Err(NnError::ShapeMismatch(format!("glu needs an even last dim, got {d}")));
        }
        let h = d / 2;
        let out: Vec<T> = self
            .data(x)
            .chunks(d)
            .flat_map(|row| (0..h).map(move |j| row[j] * sigmoid(row[h + j])))
            .collect();
        *shape.last_mut().unwrap() = h;
        self.push(Tensor::new(shape, out)?, Op::Glu { x })
    }

    pub fn swish(&mut self, x: Var) -> Result<Var, NnError> {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Swish { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NnError> {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu { x })
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Dropout { x, mask })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NnError> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| NnError::ShapeMismatch("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(NnError::ShapeMismatch(format!("concat axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(NnError::ShapeMismatch(format!("concat {:?} with {:?}", first, s)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(NnError::ShapeMismatch(format!("mean over axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let out = reduce_mean(self.data(x), outer, n, inner);
        let mut s = shape;
        s.remove(axis);
        self.push(Tensor::new(s, out)?, Op::Mean { x, axis })
    }

    /// Population standard deviation over `axis`, `sqrt(var + eps)`.
    pub fn std(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var, NnError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(NnError::ShapeMismatch(format!("std over axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mean = reduce_mean(xd, outer, n, inner);
        let nn = T::from_usize_lossy(n);
        let eps = T::from_f64_lossy(eps);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    let d = xd[(o * n + i) * inner + j] - mean[o * inner + j];
                    out[o * inner + j] += d * d;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = (*v / nn + eps).sqrt());
        let mut s = shape;
        s.remove(axis);
        self.push(Tensor::new(s, out)?, Op::Std { x, axis, mean })
    }

    /// Axis permutation; `perm[i]` names the input axis placed at position `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NnError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NnError::ShapeMismatch(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let (out, s) = permute_data(self.data(x), &shape, perm);
        self.push(Tensor::new(s, out)?, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, NnError> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(NnError::ShapeMismatch("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x })
    }

    /// Inserts a new axis at `axis` and repeats the input `n` times along it.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var, NnError> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(NnError::ShapeMismatch(format!("expand axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xd[o * inner..(o + 1) * inner]);
            }
        }
        let mut s = shape;
        s.insert(axis, n);
        self.push(Tensor::new(s, out)?, Op::Expand { x, axis, n })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let mut acc = *parts.first().ok_or_else(|| NnError::ShapeMismatch("sum of nothing".into()))?;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Unit-normalizes each row over the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, NnError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let xd = self.data(x);
        let mut norms = Vec::with_capacity(xd.len() / d.max(1));
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(NnError::InvalidArgument("l2_normalize of a zero vector".into()));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        self.push(Tensor::new(shape, out)?, Op::L2Normalize { x, norms })
    }

    /// Registers a scalar loss whose gradient w.r.t. `x` was computed by the caller.
    pub(crate) fn fused_loss(&mut self, x: Var, value: T, local_grad: Vec<T>) -> Result<Var, NnError> {
        debug_assert_eq!(local_grad.len(), self.value(x).len());
        self.push(Tensor::scalar(value), Op::FusedLoss { x, local_grad })
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Seeds `d root = 1` and sweeps the tape backwards.
    pub fn backward(&mut self, root: Var) -> Result<(), NnError> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let contributions = self.local_backward(i, &op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gout);
            for (v, g) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_backward(&self, idx: usize, op: &Op<T>, gout: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut res = Vec::new();
        let y = self.nodes[idx].value.data();
        let out_shape = self.nodes[idx].value.shape();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb, batched } => {
                let sa = self.shape(*a);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = out_shape[out_shape.len() - 1];
                let lead: usize = sa[..sa.len() - 2].iter().product();
                let ad = self.data(*a);
                let bd = self.data(*b);
                // b viewed as k x n: (rsb, csb)
                let (rsb, csb) = if *tb { (1isize, k as isize) } else { (n as isize, 1isize) };
                if self.needs(*a) {
                    // dA = dC (m x n) * B^T (n x k)
                    let mut da = vec![T::zero(); ad.len()];
                    if *batched {
                        for i in 0..lead {
                            T::gemm(
                                m, n, k, T::one(),
                                &gout[i * m * n..(i + 1) * m * n], n as isize, 1,
                                &bd[i * k * n..(i + 1) * k * n], csb, rsb,
                                T::zero(), &mut da[i * m * k..(i + 1) * m * k], k as isize, 1,
                            );
                        }
                    } else {
                        T::gemm(lead * m, n, k, T::one(), gout, n as isize, 1, bd, csb, rsb, T::zero(), &mut da, k as isize, 1);
                    }
                    res.push((*a, da));
                }
                if self.needs(*b) {
                    // dB (k x n) = A^T (k x m) * dC (m x n), written through B's layout
                    let mut db = vec![T::zero(); bd.len()];
                    if *batched {
                        for i in 0..lead {
                            T::gemm(
                                k, m, n, T::one(),
                                &ad[i * m * k..(i + 1) * m * k], 1, k as isize,
                                &gout[i * m * n..(i + 1) * m * n], n as isize, 1,
                                T::zero(), &mut db[i * k * n..(i + 1) * k * n], rsb, csb,
                            );
                        }
                    } else {
                        T::gemm(k, lead * m, n, T::one(), ad, 1, k as isize, gout, n as isize, 1, T::zero(), &mut db, rsb, csb);
                    }
                    res.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    res.push((*a, gout.to_vec()));
                }
                if self.needs(*b) {
                    let nb = self.value(*b).len();
                    let mut db = vec![T::zero(); nb];
                    for (i, &g) in gout.iter().enumerate() {
                        db[i % nb] += g;
                    }
                    res.push((*b, db));
                }
            }
            Op::Mul { a, b } => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                let nb = bd.len();
                if self.needs(*a) {
                    res.push((*a, gout.iter().enumerate().map(|(i, &g)| g * bd[i % nb]).collect()));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); nb];
                    for (i, &g) in gout.iter().enumerate() {
                        db[i % nb] += g * ad[i];
                    }
                    res.push((*b, db));
                }
            }
            Op::Scale { a, c } => {
                res.push((*a, gout.iter().map(|&g| g * *c).collect()));
            }
            Op::Softmax { a } => {
                let d = *out_shape.last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(gout.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((*a, dx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *out_shape.last().unwrap();
                let g = self.data(*gamma);
                let dn = T::from_usize_lossy(d);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..rstd.len() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let go = &gout[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dxh = go[j] * g[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        s1 /= dn;
                        s2 /= dn;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (go[j] * g[j] - s1 - xh[j] * s2);
                        }
                    }
                    res.push((*x, dx));
                }
                push_affine_grads(&mut res, self, *gamma, *beta, xhat, gout, d);
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let c = *out_shape.last().unwrap();
                let g = self.data(*gamma);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); y.len()];
                    if *train {
                        let rows = y.len() / c;
                        let n = T::from_usize_lossy(rows);
                        let mut s1 = vec![T::zero(); c];
                        let mut s2 = vec![T::zero(); c];
                        for r in 0..rows {
                            for j in 0..c {
                                let dxh = gout[r * c + j] * g[j];
                                s1[j] += dxh;
                                s2[j] += dxh * xhat[r * c + j];
                            }
                        }
                        for r in 0..rows {
                            for j in 0..c {
                                let i = r * c + j;
                                dx[i] = rstd[j] * (gout[i] * g[j] - s1[j] / n - xhat[i] * s2[j] / n);
                            }
                        }
                    } else {
                        for (i, d) in dx.iter_mut().enumerate() {
                            *d = gout[i] * g[i % c] * rstd[i % c];
                        }
                    }
                    res.push((*x, dx));
                }
                push_affine_grads(&mut res, self, *gamma, *beta, xhat, gout, c);
            }
            Op::Conv1d { x, w, stride, pad, cols } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (b, t, cin) = (sx[0], sx[1], sx[2]);
                let (cout, kk) = (sw[0], sw[2]);
                let tout = out_shape[1];
                let ck = cin * kk;
                if self.needs(*w) {
                    // dW (cout x ck) = dOut^T (cout x b*tout) * cols (b*tout x ck)
                    let mut dw = vec![T::zero(); cout * ck];
                    T::gemm(cout, b * tout, ck, T::one(), gout, 1, cout as isize, cols, ck as isize, 1, T::zero(), &mut dw, ck as isize, 1);
                    res.push((*w, dw));
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); b * tout * ck];
                    T::gemm(b * tout, cout, ck, T::one(), gout, cout as isize, 1, self.data(*w), ck as isize, 1, T::zero(), &mut dcols, ck as isize, 1);
                    let mut dx = vec![T::zero(); b * t * cin];
                    for bi in 0..b {
                        for to in 0..tout {
                            let row = &dcols[(bi * tout + to) * ck..(bi * tout + to + 1) * ck];
                            for k in 0..kk {
                                let ti = (to * stride + k) as isize - *pad as isize;
                                if ti < 0 || ti as usize >= t {
                                    continue;
                                }
                                let dst = &mut dx[(bi * t + ti as usize) * cin..(bi * t + ti as usize + 1) * cin];
                                for c in 0..cin {
                                    dst[c] += row[c * kk + k];
                                }
                            }
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Op::DepthwiseConv1d { x, w, pad } => {
                let sx = self.shape(*x);
                let (b, t, c) = (sx[0], sx[1], sx[2]);
                let kk = self.shape(*w)[1];
                let tout = out_shape[1];
                let xd = self.data(*x);
                let wd = self.data(*w);
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); wd.len()];
                for bi in 0..b {
                    for to in 0..tout {
                        let go = &gout[(bi * tout + to) * c..(bi * tout + to + 1) * c];
                        for k in 0..kk {
                            let ti = (to + k) as isize - *pad as isize;
                            if ti < 0 || ti as usize >= t {
                                continue;
                            }
                            let base = (bi * t + ti as usize) * c;
                            for ch in 0..c {
                                dx[base + ch] += wd[ch * kk + k] * go[ch];
                                dw[ch * kk + k] += xd[base + ch] * go[ch];
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    res.push((*x, dx));
                }
                if self.needs(*w) {
                    res.push((*w, dw));
                }
            }
            Op::Glu { x } => {
                let xd = self.data(*x);
                let d = *self.shape(*x).last().unwrap();
                let h = d / 2;
                let mut dx = vec![T::zero(); xd.len()];
                for (r, row) in xd.chunks(d).enumerate() {
                    for j in 0..h {
                        let s = sigmoid(row[h + j]);
                        let g = gout[r * h + j];
                        dx[r * d + j] = g * s;
                        dx[r * d + h + j] = g * row[j] * s * (T::one() - s);
                    }
                }
                res.push((*x, dx));
            }
            Op::Swish { x } => {
                let xd = self.data(*x);
                res.push((
                    *x,
                    xd.iter()
                        .zip(gout)
                        .map(|(&v, &g)| {
                            let s = sigmoid(v);
                            g * (s + v * s * (T::one() - s))
                        })
                        .collect(),
                ));
            }
            Op::Sigmoid { x } => {
                res.push((*x, y.iter().zip(gout).map(|(&s, &g)| g * s * (T::one() - s)).collect()));
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                res.push((
                    *x,
                    xd.iter()
                        .zip(gout)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                ));
            }
            Op::Dropout { x, mask } => {
                res.push((*x, gout.iter().zip(mask).map(|(&g, &m)| g * m).collect()));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut g = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            g.extend_from_slice(&gout[start..start + n * inner]);
                        }
                        res.push((v, g));
                    }
                    offset += n;
                }
            }
            Op::Mean { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let scale = T::one() / T::from_usize_lossy(n);
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            dx[(o * n + i) * inner + j] = gout[o * inner + j] * scale;
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Std { x, axis, mean } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let xd = self.data(*x);
                let nn = T::from_usize_lossy(n);
                let mut dx = vec![T::zero(); xd.len()];
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            let k = o * inner + j;
                            let idx = (o * n + i) * inner + j;
                            dx[idx] = gout[k] * (xd[idx] - mean[k]) / (nn * y[k]);
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Permute { x, perm } => {
                let inv = inverse_perm(perm);
                let (dx, _) = permute_data(gout, out_shape, &inv);
                res.push((*x, dx));
            }
            Op::Reshape { x } => res.push((*x, gout.to_vec())),
            Op::Expand { x, axis, n } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                let mut dx = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for r in 0..*n {
                        let src = &gout[(o * n + r) * inner..(o * n + r + 1) * inner];
                        for (d, &g) in dx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::SumAll { x } => {
                res.push((*x, vec![gout[0]; self.value(*x).len()]));
            }
            Op::L2Normalize { x, norms } => {
                let d = *out_shape.last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for (r, (yr, gr)) in y.chunks(d).zip(gout.chunks(d)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                res.push((*x, dx));
            }
            Op::FusedLoss { x, local_grad } => {
                res.push((*x, local_grad.iter().map(|&g| g * gout[0]).collect()));
            }
        }
        res
    }
}

fn reduce_mean<T: Scalar>(xd: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let nn = T::from_usize_lossy(n);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..n {
            let src = &xd[(o * n + i) * inner..(o * n + i + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= nn);
    out
}

fn push_affine_grads<T: Scalar>(
    res: &mut Vec<(Var, Vec<T>)>,
    g: &Graph<T>,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    gout: &[T],
    c: usize,
) {
    if g.needs(gamma) {
        let mut dg = vec![T::zero(); c];
        for (i, (&go, &xh)) in gout.iter().zip(xhat).enumerate() {
            dg[i % c] += go * xh;
        }
        res.push((gamma, dg));
    }
    if g.needs(beta) {
        let mut db = vec![T::zero(); c];
        for (i, &go) in gout.iter().enumerate() {
            db[i % c] += go;
        }
        res.push((beta, db));
    }
}
