//! The joint objective: multi-label binary cross-entropy over per-class
//! sigmoids plus a symmetric InfoNCE contrastive term between pooled
//! audio embeddings and semantic-description embeddings, mixed by a
//! learnable scalar weight.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Clamp bound applied to probabilities before the log.
pub const PRED_EPS: f64 = 1e-7;

/// Itemized loss for one step or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub con: f64,
    pub lambda: f64,
    pub tau: f64,
    pub total: f64,
}

/// `total = bce + lambda * con`, exactly.
pub fn total_loss(bce: f64, con: f64, lambda: f64, tau: f64) -> LossBreakdown {
    LossBreakdown {
        bce,
        con,
        lambda,
        tau,
        total: bce + lambda * con,
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_pred(p: f64) -> f64 {
    p.clamp(PRED_EPS, 1.0 - PRED_EPS)
}

/// Mean binary cross-entropy over an `[N, K]` probability matrix against
/// 0/1 targets of the same shape. Probabilities are clamped to
/// `[eps, 1 - eps]` before the log.
pub fn bce_loss(preds: &Tensor, labels: &Tensor) -> Result<f64> {
    if preds.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            context: "bce_loss".into(),
            expected: format!("{:?}", preds.shape()),
            got: format!("{:?}", labels.shape()),
        });
    }
    let n = preds.len() as f64;
    let mut acc = 0.0;
    for (&p, &s) in preds.data().iter().zip(labels.data()) {
        let pc = clamp_pred(p);
        acc += s * pc.ln() + (1.0 - s) * (1.0 - pc).ln();
    }
    Ok(-acc / n)
}

/// BCE from logits with the exact gradient of the clamped computation:
/// returns `(loss, dloss/dlogits)` for logits `[N, K]`.
pub fn bce_from_logits(logits: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            context: "bce_from_logits".into(),
            expected: format!("{:?}", logits.shape()),
            got: format!("{:?}", labels.shape()),
        });
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Tensor::zeros(logits.shape());
    for (i, (&z, &s)) in logits.data().iter().zip(labels.data()).enumerate() {
        let p = sigmoid(z);
        let pc = clamp_pred(p);
        loss -= (s * pc.ln() + (1.0 - s) * (1.0 - pc).ln()) / n;
        // d/dpc of the summand, zero outside the clamp range.
        if p > PRED_EPS && p < 1.0 - PRED_EPS {
            let dpc = -(s / pc - (1.0 - s) / (1.0 - pc)) / n;
            dlogits.data_mut()[i] = dpc * p * (1.0 - p);
        }
    }
    Ok((loss, dlogits))
}

fn pool_rows(h: &Tensor) -> Vec<f64> {
    let (n, d) = (h.rows(), h.cols());
    let mut out = vec![0.0; d];
    for r in 0..n {
        for (o, v) in out.iter_mut().zip(h.row(r)) {
            *o += v / n as f64;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Symmetric InfoNCE on cosine similarities between pooled audio rows and
/// text embeddings, with temperature `tau`. Computed from the raw
/// (unpooled) audio feature maps per the loss definition.
pub fn contrastive_loss(h_batch: &[Tensor], r_batch: &[Tensor], tau: f64) -> Result<f64> {
    let pooled: Vec<Vec<f64>> = h_batch.iter().map(pool_rows).collect();
    let texts: Vec<Vec<f64>> = r_batch.iter().map(|t| t.row(0).to_vec()).collect();
    let (loss, _, _) = contrastive_core(&pooled, &texts, tau)?;
    Ok(loss)
}

/// Core InfoNCE with gradients wrt the pooled audio vectors and the text
/// vectors: returns `(loss, d_pooled, d_text)`.
pub fn contrastive_core(
    pooled: &[Vec<f64>],
    texts: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    assert_eq!(pooled.len(), texts.len(), "batch sizes must match");
    assert!(tau > 0.0, "temperature must be positive");
    let n = pooled.len();
    let d = pooled[0].len();
    let a_norms: Vec<f64> = pooled.iter().map(|v| norm(v)).collect();
    let b_norms: Vec<f64> = texts.iter().map(|v| norm(v)).collect();
    if a_norms.iter().chain(&b_norms).any(|&x| x < 1e-12) {
        return Err(Error::DegenerateEmbedding);
    }

    // Cosine similarity matrix.
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = pooled[i].iter().zip(&texts[j]).map(|(a, b)| a * b).sum();
            sim[i * n + j] = dot / (a_norms[i] * b_norms[j]);
        }
    }

    // Row softmax (audio -> text) and column softmax (text -> audio) of
    // sim / tau; loss takes the diagonal of each.
    let mut loss = 0.0;
    let mut dsim = vec![0.0; n * n];
    for i in 0..n {
        // row i
        let row: Vec<f64> = (0..n).map(|j| sim[i * n + j] / tau).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss -= (row[i] - max - z.ln()) / n as f64;
        for j in 0..n {
            let softmax = exps[j] / z;
            dsim[i * n + j] += (softmax - f64::from(j == i)) / (n as f64 * tau);
        }
        // column i
        let col: Vec<f64> = (0..n).map(|kk| sim[kk * n + i] / tau).collect();
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss -= (col[i] - max - z.ln()) / n as f64;
        for kk in 0..n {
            let softmax = exps[kk] / z;
            dsim[kk * n + i] += (softmax - f64::from(kk == i)) / (n as f64 * tau);
        }
    }

    // Cosine backward.
    let mut d_pooled = vec![vec![0.0; d]; n];
    let mut d_text = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let g = dsim[i * n + j];
            if g == 0.0 {
                continue;
            }
            let s = sim[i * n + j];
            for c in 0..d {
                let a_hat = pooled[i][c] / a_norms[i];
                let b_hat = texts[j][c] / b_norms[j];
                d_pooled[i][c] += g * (b_hat - s * a_hat) / a_norms[i];
                d_text[j][c] += g * (a_hat - s * b_hat) / b_norms[j];
            }
        }
    }
    Ok((loss, d_pooled, d_text))
}
