//! Geometric and probabilistic primitives shared by every other module.

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Tensor};

use serde::{Deserialize, Serialize};

/// Perturbation norm for ball projections and attack budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            other => Err(Error::Config(format!("unknown norm {other:?}"))),
        }
    }
}

/// Row-wise softmax with max subtraction. Total on finite input.
pub fn softmax(z: &Tensor) -> Tensor {
    let rows = z.rows();
    let k = z.row_len();
    let mut out = Tensor::zeros(z.shape());
    for i in 0..rows {
        softmax_row(z.row(i), &mut out.row_mut(i)[..k]);
    }
    out
}

/// Softmax of one row into `out`.
pub fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// One-hot rows; labels must lie in [0, classes).
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InputDomain(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        out.row_mut(i)[y] = 1.0;
    }
    Ok(out)
}

/// Per-row min/max positions, first occurrence on ties. Fixed indices give
/// the defense's differentiation path a well-defined subgradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowExtrema {
    pub min_idx: usize,
    pub max_idx: usize,
}

pub fn row_extrema(row: &[f64]) -> RowExtrema {
    let mut min_idx = 0;
    let mut max_idx = 0;
    for (j, &v) in row.iter().enumerate() {
        if v < row[min_idx] {
            min_idx = j;
        }
        if v > row[max_idx] {
            max_idx = j;
        }
    }
    RowExtrema { min_idx, max_idx }
}

/// Per-row min-max normalization: `(g - min) / (max - min + eps)`.
/// A constant row maps to all zeros (denominator collapses to `eps`).
pub fn minmax_normalize(g: &Tensor, eps: f64) -> (Tensor, Vec<RowExtrema>) {
    assert!(eps > 0.0, "minmax eps must be positive");
    let rows = g.rows();
    let mut out = Tensor::zeros(g.shape());
    let mut extrema = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = g.row(i);
        let ext = row_extrema(row);
        let min = row[ext.min_idx];
        let denom = row[ext.max_idx] - min + eps;
        for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
            *o = (v - min) / denom;
        }
        extrema.push(ext);
    }
    (out, extrema)
}

/// Default epsilon for min-max normalization.
pub const MINMAX_EPS: f64 = 1e-12;

/// Projects `cand` (in place) onto the norm ball of `radius` around `orig`,
/// intersected with the [0,1] box. Linf clamps per element; L2 rescales
/// radially. The rescale is skipped when already inside, so the projection
/// is idempotent.
pub fn project_slice(cand: &mut [f64], orig: &[f64], norm: Norm, radius: f64) {
    debug_assert_eq!(cand.len(), orig.len());
    match norm {
        Norm::Linf => {
            for (c, &o) in cand.iter_mut().zip(orig) {
                let d = (*c - o).clamp(-radius, radius);
                *c = (o + d).clamp(0.0, 1.0);
            }
        }
        Norm::L2 => {
            let mut sq = 0.0;
            for (c, &o) in cand.iter_mut().zip(orig) {
                let d = *c - o;
                sq += d * d;
            }
            let n = sq.sqrt();
            if n > radius {
                let scale = radius / n;
                for (c, &o) in cand.iter_mut().zip(orig) {
                    *c = o + (*c - o) * scale;
                }
            }
            for c in cand.iter_mut() {
                *c = c.clamp(0.0, 1.0);
            }
        }
    }
}

/// Tensor-level ball-and-box projection. The whole tensor is treated as one
/// vector; per-image projection slices the batch first.
pub fn project_ball(x_adv: &Tensor, x_orig: &Tensor, norm: Norm, radius: f64) -> Result<Tensor> {
    if x_adv.shape() != x_orig.shape() {
        return Err(Error::ShapeMismatch {
            expected: x_orig.shape().to_vec(),
            got: x_adv.shape().to_vec(),
        });
    }
    let mut out = x_adv.clone();
    project_slice(out.data_mut(), x_orig.data(), norm, radius);
    Ok(out)
}

/// Mean cosine similarity over all unordered row pairs. Pairs containing a
/// zero row are skipped; fewer than two nonzero rows is undefined.
pub fn pairwise_cosine(mat: &Tensor) -> Result<f64> {
    let n = mat.rows();
    if n < 2 {
        return Err(Error::UndefinedMetric(
            "pairwise cosine needs at least 2 rows".into(),
        ));
    }
    let norms: Vec<f64> = (0..n).map(|i| l2_norm(mat.row(i))).collect();
    let nonzero = norms.iter().filter(|&&v| v > 0.0).count();
    if nonzero < 2 {
        return Err(Error::UndefinedMetric(
            "pairwise cosine needs at least 2 nonzero rows".into(),
        ));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        for j in (i + 1)..n {
            if norms[j] == 0.0 {
                continue;
            }
            let d: f64 = mat.row(i).iter().zip(mat.row(j)).map(|(a, b)| a * b).sum();
            sum += d / (norms[i] * norms[j]);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let n = probs.rows();
    debug_assert_eq!(n, labels.len());
    let correct = (0..n).filter(|&i| argmax(probs.row(i)) == labels[i]).count();
    correct as f64 / n as f64
}

/// Index of the row maximum, first occurrence on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `sign` with the 0 -> 0 convention, removing undefined step directions.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub use crate::tensor::{dot, l2_norm as vec_l2, linf_norm, sq_norm as vec_sq};
