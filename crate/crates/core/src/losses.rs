//! Focal, center and batch-hard triplet losses and their weighted sum.
//!
//! Each loss is a single fused graph node: the forward pass computes the
//! value and the exact gradient w.r.t. its input together.

use serde::{Deserialize, Serialize};

use crate::nn::{Graph, NnError, Tensor, Var};
use crate::scalar::Scalar;

pub use crate::nn::{TripletDistance, TripletStats};

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("no center for class {0}")]
    UnknownClass(usize),
    #[error("non-finite loss term {0}")]
    NonFiniteValue(&'static str),
    #[error("invalid loss input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// `alpha_c = N / (C * N_c)`, clamped to `[alpha_min, alpha_max]`.
    InverseFrequency,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha_mode: AlphaMode,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub triplet_margin: f64,
    pub triplet_distance: TripletDistance,
    pub lambda_focal: f64,
    pub lambda_center: f64,
    pub lambda_tri: f64,
    pub center_lr: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha_mode: AlphaMode::InverseFrequency,
            alpha_min: 0.1,
            alpha_max: 10.0,
            triplet_margin: 0.3,
            triplet_distance: TripletDistance::Euclidean,
            lambda_focal: 1.0,
            lambda_center: 0.01,
            lambda_tri: 0.1,
            center_lr: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if [self.lambda_focal, self.lambda_center, self.lambda_tri].iter().any(|l| !(*l >= 0.0)) {
            return Err("loss weights must be non-negative".into());
        }
        if !(self.triplet_margin > 0.0) {
            return Err("triplet margin must be positive".into());
        }
        if !(self.gamma >= 0.0) {
            return Err("focal gamma must be non-negative".into());
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_max) {
            return Err("alpha clamp range must be positive and ordered".into());
        }
        Ok(())
    }

    /// Per-class focal weights from training-set class counts.
    pub fn class_weights(&self, counts: &[usize]) -> Result<Vec<f64>, LossError> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(LossError::InvalidInput("no training samples to weight".into()));
        }
        Ok(match self.alpha_mode {
            AlphaMode::Uniform => vec![1.0; counts.len()],
            AlphaMode::InverseFrequency => counts
                .iter()
                .map(|&n| {
                    if n == 0 {
                        self.alpha_max
                    } else {
                        (total as f64 / (counts.len() as f64 * n as f64)).clamp(self.alpha_min, self.alpha_max)
                    }
                })
                .collect(),
        })
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), LossError> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(LossError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

fn rows<T: Scalar>(g: &Graph<T>, x: Var, labels: &[usize]) -> Result<(usize, usize), LossError> {
    let s = g.shape(x);
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(LossError::InvalidInput(format!(
            "expected [B, D] with B = {} labels, got {s:?}",
            labels.len()
        )));
    }
    Ok((s[0], s[1]))
}

/// Mean over the batch of `-alpha_y (1 - p_y)^gamma log p_y`, with `p` the
/// softmax of `logits: [B, C]` and `log p` clamped at `log 1e-12`.
pub fn focal_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    alpha: &[f64],
    gamma: f64,
) -> Result<Var, LossError> {
    let (b, c) = rows(g, logits, labels)?;
    check_labels(labels, c)?;
    if alpha.len() != c {
        return Err(LossError::InvalidInput(format!("{} class weights for {c} classes", alpha.len())));
    }
    let z = g.value(logits).data();
    let mut total = 0.0f64;
    let mut grad = vec![T::zero(); b * c];
    for (i, &y) in labels.iter().enumerate() {
        let row = &z[i * c..(i + 1) * c];
        let max = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / sum).collect();
        let py = p[y];
        let clamped = py < LOG_CLAMP;
        let logp = py.max(LOG_CLAMP).ln();
        let q = 1.0 - py;
        let a = alpha[y];
        total += -a * q.powf(gamma) * logp;
        // dL/dp_y, then through the softmax
        let focus = if gamma == 0.0 || q == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) * logp };
        let direct = if clamped { 0.0 } else { q.powf(gamma) / py };
        let dl_dp = -a * (focus + direct);
        for j in 0..c {
            let d = if j == y { 1.0 } else { 0.0 };
            grad[i * c + j] = T::from_f64_lossy(dl_dp * py * (d - p[j]) / b as f64);
        }
    }
    let value = total / b as f64;
    if !value.is_finite() {
        return Err(LossError::NonFiniteValue("focal"));
    }
    Ok(g.fused_loss(logits, T::from_f64_lossy(value), grad)?)
}

/// Class centers `[C, D]`, initialized to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank<T> {
    pub centers: Tensor<T>,
}

impl<T: Scalar> CenterBank<T> {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            centers: Tensor::zeros(&[classes, dim]),
        }
    }

    pub fn classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn center(&self, class: usize) -> &[T] {
        self.centers.row(class)
    }

    /// `c_j <- c_j - lr * sum_{i: y_i = j} (c_j - x_i) / (1 + n_j)`.
    pub fn update(&mut self, embeddings: &Tensor<T>, labels: &[usize], lr: f64) -> Result<(), LossError> {
        let d = self.dim();
        if embeddings.shape() != [labels.len(), d] {
            return Err(LossError::InvalidInput(format!(
                "center update needs [{}, {d}], got {:?}",
                labels.len(),
                embeddings.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.classes()) {
            return Err(LossError::UnknownClass(l));
        }
        let mut delta = vec![0.0f64; self.classes() * d];
        let mut count = vec![0usize; self.classes()];
        let x = embeddings.data();
        let c = self.centers.data();
        for (i, &y) in labels.iter().enumerate() {
            count[y] += 1;
            for k in 0..d {
                delta[y * d + k] += c[y * d + k].to_f64_lossy() - x[i * d + k].to_f64_lossy();
            }
        }
        let cm = self.centers.data_mut();
        for (j, &n) in count.iter().enumerate() {
            if n == 0 {
                continue;
            }
            for k in 0..d {
                let v = cm[j * d + k].to_f64_lossy() - lr * delta[j * d + k] / (1.0 + n as f64);
                cm[j * d + k] = T::from_f64_lossy(v);
            }
        }
        Ok(())
    }
}

/// Mean over the batch of `0.5 * |x_i - c_{y_i}|^2`. Centers are constants.
pub fn center_loss<T: Scalar>(
    g: &mut Graph<T>,
    embeddings: Var,
    labels: &[usize],
    bank: &CenterBank<T>,
) -> Result<Var, LossError> {
    let (b, d) = rows(g, embeddings, labels)?;
    if d != bank.dim() {
        return Err(LossError::InvalidInput(format!("embedding dim {d} vs center dim {}", bank.dim())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= bank.classes()) {
        return Err(LossError::UnknownClass(l));
    }
    let x = g.value(embeddings).data();
    let mut total = 0.0f64;
    let mut grad = vec![T::zero(); b * d];
    for (i, &y) in labels.iter().enumerate() {
        let c = bank.center(y);
        for k in 0..d {
            let diff = x[i * d + k].to_f64_lossy() - c[k].to_f64_lossy();
            total += 0.5 * diff * diff;
            grad[i * d + k] = T::from_f64_lossy(diff / b as f64);
        }
    }
    let value = total / b as f64;
    if !value.is_finite() {
        return Err(LossError::NonFiniteValue("center"));
    }
    Ok(g.fused_loss(embeddings, T::from_f64_lossy(value), grad)?)
}

/// Pairwise distance and its gradient w.r.t. `a` (the gradient w.r.t. `b`
/// follows by symmetry with the arguments swapped).
fn distance(a: &[f64], b: &[f64], kind: TripletDistance) -> (f64, Vec<f64>) {
    match kind {
        TripletDistance::Euclidean => {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            if d == 0.0 {
                (0.0, vec![0.0; a.len()])
            } else {
                (d, diff.iter().map(|v| v / d).collect())
            }
        }
        TripletDistance::Cosine => {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return (1.0, vec![0.0; a.len()]);
            }
            let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            let grad = a.iter().zip(b).map(|(x, y)| -(y / nb - cos * x / na) / na).collect();
            (1.0 - cos, grad)
        }
    }
}

/// Batch-hard triplet loss: per anchor the farthest positive and nearest
/// negative, hinge `max(d_p - d_n + margin, 0)`, averaged over anchors that
/// have both. A batch without any such anchor gives 0 and is flagged.
pub fn triplet_loss<T: Scalar>(
    g: &mut Graph<T>,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
    kind: TripletDistance,
) -> Result<(Var, TripletStats), LossError> {
    let (b, d) = rows(g, embeddings, labels)?;
    let x: Vec<f64> = g.value(embeddings).data().iter().map(|v| v.to_f64_lossy()).collect();
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut dist = vec![0.0f64; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let (v, _) = distance(row(i), row(j), kind);
            dist[i * b + j] = v;
            dist[j * b + i] = v;
        }
    }
    let mut grad = vec![0.0f64; b * d];
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut active = Vec::new();
    for a in 0..b {
        let pos = (0..b)
            .filter(|&j| j != a && labels[j] == labels[a])
            .fold(None, |best: Option<usize>, j| match best {
                Some(k) if dist[a * b + k] >= dist[a * b + j] => Some(k),
                _ => Some(j),
            });
        let neg = (0..b)
            .filter(|&j| labels[j] != labels[a])
            .fold(None, |best: Option<usize>, j| match best {
                Some(k) if dist[a * b + k] <= dist[a * b + j] => Some(k),
                _ => Some(j),
            });
        let (Some(p), Some(n)) = (pos, neg) else {
            continue;
        };
        valid += 1;
        let h = dist[a * b + p] - dist[a * b + n] + margin;
        if h > 0.0 {
            total += h;
            active.push((a, p, n));
        }
    }
    if valid == 0 {
        let zero = g.fused_loss(embeddings, T::zero(), vec![T::zero(); b * d])?;
        return Ok((zero, TripletStats { valid_anchors: 0, degenerate: true }));
    }
    let inv = 1.0 / valid as f64;
    for (a, p, n) in active {
        for (other, sign) in [(p, 1.0), (n, -1.0)] {
            let (_, ga) = distance(row(a), row(other), kind);
            let (_, go) = distance(row(other), row(a), kind);
            for k in 0..d {
                grad[a * d + k] += sign * inv * ga[k];
                grad[other * d + k] += sign * inv * go[k];
            }
        }
    }
    let value = total * inv;
    if !value.is_finite() {
        return Err(LossError::NonFiniteValue("triplet"));
    }
    let grad = grad.into_iter().map(T::from_f64_lossy).collect();
    let v = g.fused_loss(embeddings, T::from_f64_lossy(value), grad)?;
    Ok((v, TripletStats { valid_anchors: valid, degenerate: false }))
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub focal: f64,
    pub center: f64,
    pub triplet: f64,
}

impl LossParts {
    /// `lambda_focal * focal + lambda_center * center + lambda_tri * triplet`.
    pub fn total(&self, cfg: &LossConfig) -> Result<f64, LossError> {
        for (v, name) in [(self.focal, "focal"), (self.center, "center"), (self.triplet, "triplet")] {
            if !v.is_finite() {
                return Err(LossError::NonFiniteValue(name));
            }
        }
        Ok(cfg.lambda_focal * self.focal + cfg.lambda_center * self.center + cfg.lambda_tri * self.triplet)
    }
}

/// Weighted sum of the three loss nodes inside the graph.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    focal: Var,
    center: Var,
    triplet: Var,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let f = g.scale(focal, T::from_f64_lossy(cfg.lambda_focal))?;
    let c = g.scale(center, T::from_f64_lossy(cfg.lambda_center))?;
    let t = g.scale(triplet, T::from_f64_lossy(cfg.lambda_tri))?;
    Ok(g.add_all(&[f, c, t])?)
}
