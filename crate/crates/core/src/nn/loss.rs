use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::linalg::DenseMatrix;

/// Supervision for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(DenseMatrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(y) => y.len(),
            Targets::Values(y) => y.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(y) => Targets::Classes(idx.iter().map(|&i| y[i]).collect()),
            Targets::Values(y) => {
                let mut data = Vec::with_capacity(idx.len() * y.cols());
                for &i in idx {
                    data.extend_from_slice(y.row(i));
                }
                Targets::Values(
                    DenseMatrix::new(idx.len(), y.cols(), data).expect("rows of a valid matrix"),
                )
            }
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes(y) => Some(y),
            Targets::Values(_) => None,
        }
    }
}

/// Per-sample loss; gradients returned by [`Loss::eval`] are of the
/// unaveraged per-sample loss, one row per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Loss {
    /// Softmax cross-entropy against class indices.
    CrossEntropy,
    /// `½ Σ_j h_j (s_j − y_j)²` against real targets.
    DiagQuadratic { curvature: Vec<f64> },
}

impl Loss {
    /// Mean loss over the batch and per-sample output gradients.
    pub fn eval(&self, logits: &DenseMatrix, targets: &Targets) -> Result<(f64, DenseMatrix)> {
        match (self, targets) {
            (Loss::CrossEntropy, Targets::Classes(y)) => loss_ce(logits, y),
            (Loss::DiagQuadratic { curvature }, Targets::Values(y)) => {
                loss_diag_quadratic(logits, y, curvature)
            }
            _ => Err(crate::Error::Contract(
                "loss and target kinds do not match".into(),
            )),
        }
    }
}

/// Softmax cross-entropy. Row `i` of the gradient is
/// `softmax(logits_i) − onehot(y_i)`.
pub fn loss_ce(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    let (b, k) = logits.shape();
    ensure!(
        labels.len() == b,
        "{} labels for {b} logit rows",
        labels.len()
    );
    ensure!(
        labels.iter().all(|&y| y < k),
        "label out of range for {k} classes"
    );
    let mut grad = DenseMatrix::zeros(b, k);
    let mut total = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[labels[i]];
        let g = grad.row_mut(i);
        for j in 0..k {
            g[j] = (row[j] - lse).exp();
        }
        g[labels[i]] -= 1.0;
    }
    Ok((if b == 0 { 0.0 } else { total / b as f64 }, grad))
}

fn loss_diag_quadratic(
    out: &DenseMatrix,
    y: &DenseMatrix,
    h: &[f64],
) -> Result<(f64, DenseMatrix)> {
    ensure!(
        out.shape() == y.shape() && h.len() == out.cols(),
        "quadratic loss shapes do not match"
    );
    let (b, d) = out.shape();
    let mut grad = DenseMatrix::zeros(b, d);
    let mut total = 0.0;
    for i in 0..b {
        let (o, t) = (out.row(i), y.row(i));
        let g = grad.row_mut(i);
        for j in 0..d {
            let r = o[j] - t[j];
            total += 0.5 * h[j] * r * r;
            g[j] = h[j] * r;
        }
    }
    Ok((if b == 0 { 0.0 } else { total / b as f64 }, grad))
}
