//! Feature–weight angles and the angular prediction `P^A_c = π − ∠(φ, W_c)`.
//!
//! Angular logits only see the directions of the feature vector and of each
//! classifier row, so rescaling either (per sample or per class) leaves them
//! unchanged. Linear logits `φ·W_c` do not have that property, which is what
//! lets head classes with large weight norms dominate linear predictions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{arccos_with_grad, dot, norm, safe_arccos, softmax_rows, Matrix};

/// Added to `‖φ‖` on the lenient path so all-zero ReLU features stay defined.
pub const FEATURE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    Linear,
    Angular,
    Lws,
}

impl std::fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictionMode::Linear => "linear",
            PredictionMode::Angular => "angular",
            PredictionMode::Lws => "lws",
        })
    }
}

impl std::str::FromStr for PredictionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(PredictionMode::Linear),
            "angular" => Ok(PredictionMode::Angular),
            "lws" => Ok(PredictionMode::Lws),
            other => Err(Error::Invalid(format!("unknown prediction mode `{other}`"))),
        }
    }
}

/// Angles `A_c(x) ∈ [0, π]`, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleBatch {
    pub angles: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    pub values: Matrix,
    pub mode: PredictionMode,
}

fn check_shapes(features: &Matrix, weights: &Matrix) -> Result<()> {
    if features.cols() != weights.cols() {
        return Err(Error::shape(
            "angles",
            format!("feature width {}", weights.cols()),
            features.cols(),
        ));
    }
    Ok(())
}

/// Cosine similarities. With `lenient`, the norm floor replaces the
/// zero-norm error.
fn cosines(features: &Matrix, weights: &Matrix, lenient: bool) -> Result<Matrix> {
    check_shapes(features, weights)?;
    let w_norms = weights.row_norms();
    if let Some(index) = w_norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm {
            what: "classifier weight",
            index,
        });
    }
    let mut out = Matrix::zeros(features.rows(), weights.rows());
    for (i, phi) in features.row_iter().enumerate() {
        let mut f_norm = norm(phi);
        if lenient {
            f_norm += FEATURE_NORM_FLOOR;
        } else if f_norm == 0.0 {
            return Err(Error::ZeroNorm {
                what: "feature",
                index: i,
            });
        }
        for (c, w) in weights.row_iter().enumerate() {
            out[(i, c)] = dot(phi, w) / (f_norm * w_norms[c]);
        }
    }
    Ok(out)
}

/// `A_c(x) = arccos(φ·W_c / (‖φ‖‖W_c‖))`.
pub fn angles(features: &Matrix, weights: &Matrix) -> Result<AngleBatch> {
    let mut cos = cosines(features, weights, false)?;
    for v in cos.as_mut_slice() {
        *v = safe_arccos(*v)?;
    }
    Ok(AngleBatch { angles: cos })
}

/// Same as [`angles`] but with the feature-norm floor, so all-zero feature
/// rows map to `π/2` against every class instead of failing.
pub fn angles_lenient(features: &Matrix, weights: &Matrix) -> Result<AngleBatch> {
    let mut cos = cosines(features, weights, true)?;
    for v in cos.as_mut_slice() {
        *v = safe_arccos(*v)?;
    }
    Ok(AngleBatch { angles: cos })
}

fn logits_from_angles(a: AngleBatch) -> LogitBatch {
    LogitBatch {
        values: a.angles.map(|v| PI - v),
        mode: PredictionMode::Angular,
    }
}

/// `P^A_c = π − A_c`.
pub fn angular_logits(features: &Matrix, weights: &Matrix) -> Result<LogitBatch> {
    angles(features, weights).map(logits_from_angles)
}

pub fn angular_logits_lenient(features: &Matrix, weights: &Matrix) -> Result<LogitBatch> {
    angles_lenient(features, weights).map(logits_from_angles)
}

/// Row-wise softmax of the angular logits.
pub fn angular_probs(features: &Matrix, weights: &Matrix) -> Result<Matrix> {
    softmax_rows(&angular_logits(features, weights)?.values)
}

pub fn angular_probs_lenient(features: &Matrix, weights: &Matrix) -> Result<Matrix> {
    softmax_rows(&angular_logits_lenient(features, weights)?.values)
}

/// Angular logits on the differentiable path: norm floor plus the ε-clamped
/// arccos. This is the function [`angular_backward`] differentiates.
pub fn angular_logits_train(features: &Matrix, weights: &Matrix) -> Result<Matrix> {
    let mut cos = cosines(features, weights, true)?;
    for v in cos.as_mut_slice() {
        *v = PI - arccos_with_grad(*v).0;
    }
    Ok(cos)
}

/// Gradients of a loss with respect to `φ` and `W`, given its gradient
/// with respect to the training-path angular logits.
pub fn angular_backward(
    features: &Matrix,
    weights: &Matrix,
    d_logits: &Matrix,
) -> Result<(Matrix, Matrix)> {
    check_shapes(features, weights)?;
    if d_logits.shape() != (features.rows(), weights.rows()) {
        return Err(Error::shape(
            "angular_backward",
            format!("{}x{}", features.rows(), weights.rows()),
            format!("{}x{}", d_logits.rows(), d_logits.cols()),
        ));
    }
    let w_norms = weights.row_norms();
    if let Some(index) = w_norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm {
            what: "classifier weight",
            index,
        });
    }
    let mut d_phi = Matrix::zeros(features.rows(), features.cols());
    let mut d_w = Matrix::zeros(weights.rows(), weights.cols());
    for (i, phi) in features.row_iter().enumerate() {
        let raw = norm(phi);
        let f_norm = raw + FEATURE_NORM_FLOOR;
        // d‖φ‖/dφ = φ/‖φ‖, zero at the origin
        let inv_raw = if raw > 0.0 { 1.0 / raw } else { 0.0 };
        for (c, w) in weights.row_iter().enumerate() {
            let g = d_logits[(i, c)];
            if g == 0.0 {
                continue;
            }
            let m = w_norms[c];
            let u = dot(phi, w) / (f_norm * m);
            // d(π − arccos u)/du
            let k = -arccos_with_grad(u).1;
            if k == 0.0 {
                continue;
            }
            let gk = g * k;
            let a = gk / (f_norm * m);
            let b = gk * u * inv_raw / f_norm;
            for (j, (&p, &wj)) in phi.iter().zip(w).enumerate() {
                d_phi[(i, j)] += a * wj - b * p;
                d_w[(c, j)] += a * p - gk * u * wj / (m * m);
            }
        }
    }
    Ok((d_phi, d_w))
}
