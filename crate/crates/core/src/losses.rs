//! Training objectives: correlation BCE, the margin hinge on embedding distance, and
//! the two in-batch cross-modal contrastive losses.
//!
//! The NT-Xent variant here excludes the positive pair from its denominator, so a
//! single anchor's loss can be negative. InfoNCE keeps the positive in the
//! denominator and is always non-negative; per anchor `info_nce = softplus(nt_xent)`.

use crate::gradcore::{Scalar, Tape, Tensor, TensorError, Var};

/// Probability clamp applied before taking logarithms in [`bce`].
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_MARGIN: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("label {0} is not binary")]
    NonBinaryLabel(f64),
    #[error("{0} labels for {1} predictions")]
    LabelCount(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which in-batch contrastive objective to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contrastive {
    /// Positive excluded from the denominator.
    NtXent,
    /// Categorical cross-entropy over all `N` candidates.
    InfoNce,
}

fn check_labels(labels: &[f64], n: usize) -> Result<(), LossError> {
    if labels.len() != n {
        return Err(LossError::LabelCount(labels.len(), n));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(LossError::NonBinaryLabel(bad));
    }
    Ok(())
}

/// Mean binary cross-entropy of `prob: [N]` against binary labels, with `prob`
/// clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce<T: Scalar>(tape: &mut Tape<T>, prob: Var, labels: &[f64]) -> Result<Var, LossError> {
    let n = tape.value(prob).len();
    check_labels(labels, n)?;
    let (lo, hi) = (PROB_CLAMP, 1.0 - PROB_CLAMP);
    let total: f64 = tape
        .value(prob)
        .data()
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.as_f64().clamp(lo, hi);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    let labels = labels.to_vec();
    let inv_n = 1.0 / n as f64;
    Ok(tape.push(Tensor::scalar(T::lit(total * inv_n)), &[prob], move |a| {
        let g = a.grad.data()[0].as_f64() * inv_n;
        let dp: Vec<T> = a.inputs[0]
            .data()
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let p = p.as_f64();
                if p < lo || p > hi {
                    T::zero()
                } else {
                    T::lit(g * (-y / p + (1.0 - y) / (1.0 - p)))
                }
            })
            .collect();
        vec![Some(Tensor::new(a.inputs[0].shape().to_vec(), dp).expect("shape"))]
    }))
}

/// Mean of `y·d + (1 − y)·max(0, m − d)` over distances `dist: [N]`.
pub fn margin_contrastive<T: Scalar>(
    tape: &mut Tape<T>,
    dist: Var,
    labels: &[f64],
    margin: f64,
) -> Result<Var, LossError> {
    let n = tape.value(dist).len();
    check_labels(labels, n)?;
    let total: f64 = tape
        .value(dist)
        .data()
        .iter()
        .zip(labels)
        .map(|(&d, &y)| {
            let d = d.as_f64();
            y * d + (1.0 - y) * (margin - d).max(0.0)
        })
        .sum();
    let labels = labels.to_vec();
    let inv_n = 1.0 / n as f64;
    Ok(tape.push(Tensor::scalar(T::lit(total * inv_n)), &[dist], move |a| {
        let g = a.grad.data()[0].as_f64() * inv_n;
        let dd: Vec<T> = a.inputs[0]
            .data()
            .iter()
            .zip(&labels)
            .map(|(&d, &y)| {
                let hinge = if margin - d.as_f64() > 0.0 { -1.0 } else { 0.0 };
                T::lit(g * (y + (1.0 - y) * hinge))
            })
            .collect();
        vec![Some(Tensor::new(a.inputs[0].shape().to_vec(), dd).expect("shape"))]
    }))
}

/// `bce + margin`, unweighted.
pub fn combined<T: Scalar>(tape: &mut Tape<T>, bce: Var, margin: Var) -> Result<Var, LossError> {
    Ok(tape.add(bce, margin)?)
}

/// Cosine similarities scaled by `1/τ`: entry `(i, k)` is `cos(z_v[i], z_a[k]) / τ`.
pub fn similarity_logits<T: Scalar>(
    tape: &mut Tape<T>,
    z_v: Var,
    z_a: Var,
    tau: f64,
) -> Result<Var, LossError> {
    let nv = tape.l2_normalize(z_v, 1e-12)?;
    let na = tape.l2_normalize(z_a, 1e-12)?;
    let sim = tape.matmul_nt(nv, na)?;
    Ok(tape.scale(sim, T::lit(1.0 / tau)))
}

/// Per-anchor loss and its gradient w.r.t. one row of logits.
fn anchor_row(row: &[f64], pos: usize, kind: Contrastive) -> (f64, Vec<f64>) {
    let included = |k: usize| kind == Contrastive::InfoNce || k != pos;
    let max = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| included(k))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (k, &v) in row.iter().enumerate() {
        if included(k) {
            denom += (v - max).exp();
        }
    }
    let lse = max + denom.ln();
    let loss = lse - row[pos];
    let grad = row
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let soft = if included(k) { (v - max).exp() / denom } else { 0.0 };
            soft - if k == pos { 1.0 } else { 0.0 }
        })
        .collect();
    (loss, grad)
}

/// Mean contrastive loss over the visual anchors of a square logit matrix
/// `[N, N]` whose diagonal holds the correlated pairs. With `symmetric`, the
/// audio-anchored term is averaged in.
pub fn contrastive_from_logits<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    kind: Contrastive,
    symmetric: bool,
) -> Result<Var, LossError> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(TensorError::Shape(format!(
            "contrastive loss needs square logits, got {shape:?}"
        ))
        .into());
    }
    let n = shape[0];
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    let f: Vec<f64> = tape.value(logits).to_f64_vec();
    let mut total = 0.0;
    let mut grad = vec![0.0; n * n];
    for i in 0..n {
        let (l, g) = anchor_row(&f[i * n..(i + 1) * n], i, kind);
        total += l;
        for (k, gv) in g.into_iter().enumerate() {
            grad[i * n + k] += gv;
        }
    }
    let mut terms = 1.0;
    if symmetric {
        for k in 0..n {
            let col: Vec<f64> = (0..n).map(|i| f[i * n + k]).collect();
            let (l, g) = anchor_row(&col, k, kind);
            total += l;
            for (i, gv) in g.into_iter().enumerate() {
                grad[i * n + k] += gv;
            }
        }
        terms = 2.0;
    }
    let scale = 1.0 / (n as f64 * terms);
    let value = Tensor::scalar(T::lit(total * scale));
    Ok(tape.push(value, &[logits], move |a| {
        let s = a.grad.data()[0].as_f64() * scale;
        let d: Vec<T> = grad.iter().map(|&g| T::lit(g * s)).collect();
        vec![Some(Tensor::new(vec![n, n], d).expect("shape"))]
    }))
}

/// NT-Xent over projected visual/audio batches (`[N, D]` each, row `i` correlated).
pub fn nt_xent_batch<T: Scalar>(
    tape: &mut Tape<T>,
    z_v: Var,
    z_a: Var,
    tau: f64,
) -> Result<Var, LossError> {
    let logits = similarity_logits(tape, z_v, z_a, tau)?;
    contrastive_from_logits(tape, logits, Contrastive::NtXent, false)
}

/// InfoNCE over projected visual/audio batches (`[N, D]` each, row `i` correlated).
pub fn info_nce_batch<T: Scalar>(
    tape: &mut Tape<T>,
    z_v: Var,
    z_a: Var,
    tau: f64,
) -> Result<Var, LossError> {
    let logits = similarity_logits(tape, z_v, z_a, tau)?;
    contrastive_from_logits(tape, logits, Contrastive::InfoNce, false)
}

/// Per-anchor losses for a raw similarity matrix (row-major `n × n`), without a tape.
pub fn anchor_losses(similarities: &[f64], n: usize, tau: f64, kind: Contrastive) -> Vec<f64> {
    let logits: Vec<f64> = similarities.iter().map(|s| s / tau).collect();
    (0..n)
        .map(|i| anchor_row(&logits[i * n..(i + 1) * n], i, kind).0)
        .collect()
}
