//! Large-margin cosine classification loss.
//!
//! Logits are scaled cosines between the L2-normalized embedding and the
//! L2-normalized per-class weight rows; during training the target class's
//! cosine is reduced by an additive margin `m` before scaling by `s`, and the
//! result goes through softmax cross-entropy. Norms are guarded by a small
//! epsilon so zero embeddings degrade gracefully instead of producing NaNs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norm guard used wherever a vector is L2-normalized.
pub const NORM_EPSILON: f64 = 1e-12;

/// Output of one batched loss evaluation with gradients.
pub struct MarginLossBatch<S: Scalar> {
    /// Mean loss over the batch.
    pub loss: S,
    /// `d loss / d embeddings`, same shape as the embedding batch.
    pub grad_embeddings: Array2<S>,
    /// `d loss / d classifier weights`, shape `(classes, dim)`.
    pub grad_weights: Array2<S>,
    /// How many samples' highest cosine matches their label.
    pub correct: usize,
}

fn validate<S: Scalar>(
    weights: &ArrayView2<'_, S>,
    embeddings: &ArrayView2<'_, S>,
    labels: &[u32],
    scale: f64,
    margin: f64,
) -> Result<()> {
    let (classes, d) = weights.dim();
    let (n, de) = embeddings.dim();
    if de != d {
        return Err(Error::shape(
            format!("embedding dim {d}"),
            format!("{de}"),
        ));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{n} labels"), format!("{}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::invalid_argument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if !(scale > 0.0) {
        return Err(Error::invalid_argument(format!("scale must be positive, got {scale}")));
    }
    if !(0.0..1.0).contains(&margin) {
        return Err(Error::invalid_argument(format!(
            "margin must lie in [0, 1), got {margin}"
        )));
    }
    Ok(())
}

/// Row-normalizes a matrix with the epsilon guard; returns `(normalized, guarded norms)`.
fn normalize_rows<S: Scalar>(m: &ArrayView2<'_, S>) -> (Array2<S>, Array1<S>) {
    let eps = S::from64(NORM_EPSILON);
    let (r, _) = m.dim();
    let mut out = m.to_owned();
    let mut norms = Array1::zeros(r);
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        let guarded = if norm > eps { norm } else { eps };
        norms[i] = guarded;
        row.mapv_inplace(|v| v / guarded);
    }
    (out, norms)
}

/// Cosine rows between normalized embeddings and normalized class weights.
pub fn cosine_logits<S: Scalar>(weights: &Array2<S>, embeddings: &Array2<S>) -> Array2<S> {
    let (ehat, _) = normalize_rows(&embeddings.view());
    let (what, _) = normalize_rows(&weights.view());
    ehat.dot(&what.t())
}

/// Softmax of `scale * cosine` rows — class probabilities without margin.
pub fn class_probabilities<S: Scalar>(
    weights: &Array2<S>,
    embeddings: &Array2<S>,
    scale: f64,
) -> Result<Array2<S>> {
    if !(scale > 0.0) {
        return Err(Error::invalid_argument(format!("scale must be positive, got {scale}")));
    }
    let cos = cosine_logits(weights, embeddings);
    let s = S::from64(scale);
    Ok(softmax_rows(&cos.mapv(|v| v * s)))
}

fn softmax_rows<S: Scalar>(z: &Array2<S>) -> Array2<S> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: S = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Batched loss with analytic gradients for both the embeddings and the
/// classifier weight rows.
pub fn cosine_margin_loss_batch<S: Scalar>(
    weights: &Array2<S>,
    embeddings: &Array2<S>,
    labels: &[u32],
    scale: f64,
    margin: f64,
) -> Result<MarginLossBatch<S>> {
    validate(&weights.view(), &embeddings.view(), labels, scale, margin)?;
    let (classes, _d) = weights.dim();
    let (n, _) = embeddings.dim();
    if n == 0 {
        return Err(Error::invalid_argument("empty batch"));
    }
    let s = S::from64(scale);
    let m = S::from64(margin);

    let (ehat, enorm) = normalize_rows(&embeddings.view());
    let (what, wnorm) = normalize_rows(&weights.view());
    let cos = ehat.dot(&what.t()); // (n, classes)

    // Margin-adjusted, scaled logits.
    let mut z = cos.clone();
    for (i, &y) in labels.iter().enumerate() {
        z[(i, y as usize)] -= m;
    }
    z.mapv_inplace(|v| v * s);

    // Loss via log-sum-exp; probabilities reused for the gradient.
    let mut loss_acc = S::zero();
    let p = softmax_rows(&z);
    for (i, &y) in labels.iter().enumerate() {
        let row = z.row(i);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        loss_acc += lse - z[(i, y as usize)];
    }
    let inv_n = S::one() / S::from64(n as f64);
    let loss = loss_acc * inv_n;

    // dz = (p - onehot)/n; dcos = s * dz.
    let mut dcos = p.clone();
    for (i, &y) in labels.iter().enumerate() {
        dcos[(i, y as usize)] -= S::one();
    }
    dcos.mapv_inplace(|v| v * s * inv_n);

    // Chain through the normalizations.
    let dehat = dcos.dot(&what); // (n, d)
    let dwhat = dcos.t().dot(&ehat); // (classes, d)

    let grad_embeddings = normalize_backward(&dehat, &ehat, &enorm, embeddings);
    let grad_weights = normalize_backward(&dwhat, &what, &wnorm, weights);

    // Rank-1 training accuracy on raw cosines.
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = cos.row(i);
        let mut best = 0usize;
        for j in 1..classes {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == y as usize {
            correct += 1;
        }
    }

    Ok(MarginLossBatch {
        loss,
        grad_embeddings,
        grad_weights,
        correct,
    })
}

/// Backward through `vhat = v / max(||v||, eps)` for each row.
fn normalize_backward<S: Scalar>(
    dvhat: &Array2<S>,
    vhat: &Array2<S>,
    norms: &Array1<S>,
    raw: &Array2<S>,
) -> Array2<S> {
    let eps = S::from64(NORM_EPSILON);
    let (r, c) = dvhat.dim();
    let mut out = Array2::zeros((r, c));
    for i in 0..r {
        let raw_norm = raw
            .row(i)
            .iter()
            .map(|&v| v * v)
            .sum::<S>()
            .sqrt();
        if raw_norm > eps {
            // d v = (d vhat - (d vhat . vhat) vhat) / ||v||
            let dot = dvhat
                .row(i)
                .iter()
                .zip(vhat.row(i).iter())
                .map(|(&a, &b)| a * b)
                .sum::<S>();
            for j in 0..c {
                out[(i, j)] = (dvhat[(i, j)] - dot * vhat[(i, j)]) / norms[i];
            }
        } else {
            // Below the guard the map is linear: vhat = v / eps.
            for j in 0..c {
                out[(i, j)] = dvhat[(i, j)] / eps;
            }
        }
    }
    out
}

/// Forward-only loss for one embedding.
pub fn margin_loss_single<S: Scalar>(
    weights: &Array2<S>,
    embedding: &ArrayView1<'_, S>,
    label: u32,
    scale: f64,
    margin: f64,
) -> Result<S> {
    let emb = embedding
        .to_owned()
        .insert_axis(ndarray::Axis(0));
    let out = cosine_margin_loss_batch(weights, &emb, &[label], scale, margin)?;
    Ok(out.loss)
}
