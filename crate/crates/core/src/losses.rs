//! Training objectives: cross-entropy, label-aware smoothing (LAS), the
//! batch-adaptive smoothing state (ALAS) and angular entropy minimization
//! (AEM), with analytic gradients at the pre-softmax logits.

use std::f64::consts::FRAC_PI_2;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Upper clamp on smoothing factors so the true-class weight stays positive.
pub const MAX_SMOOTHING: f64 = 1.0 - 1e-6;

const LOG_FLOOR: f64 = 1e-300;

static LOG_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// How many times [`cross_entropy`] had to clamp `log 0`.
pub fn log_clamp_count() -> u64 {
    LOG_CLAMPS.load(Ordering::Relaxed)
}

fn clamped_ln(p: f64) -> f64 {
    if p < LOG_FLOOR {
        LOG_CLAMPS.fetch_add(1, Ordering::Relaxed);
        LOG_FLOOR.ln()
    } else {
        p.ln()
    }
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty("probabilities"));
    }
    if p.len() != q.len() {
        return Err(Error::shape("loss", p.len(), q.len()));
    }
    Ok(())
}

/// `−Σ q_i log p_i` with `0·log 0 = 0`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(-p
        .iter()
        .zip(q)
        .filter(|(_, &qi)| qi != 0.0)
        .map(|(&pi, &qi)| qi * clamped_ln(pi))
        .sum::<f64>())
}

/// Shannon entropy `−Σ p log p`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Cross-entropy plus the entropy of the prediction; zero only at a
/// one-hot prediction matching a one-hot target.
pub fn aem_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(cross_entropy(p, q)? + entropy(p))
}

/// Shape of the map from a min–max-normalized input to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingForm {
    Linear,
    /// `sin(π x / 2)`
    Concave,
}

impl SmoothingForm {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            SmoothingForm::Linear => x,
            SmoothingForm::Concave => (FRAC_PI_2 * x).sin(),
        }
    }
}

/// Min–max normalization to `[0, 1]`; a constant input maps to all ones.
pub fn normalize_minmax(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Parameters of the count-based smoothing factor `f(N_y)`.
///
/// Normalized counts go through `form` and are then mapped affinely onto
/// `[tail, head]`, so the most populous class gets `head` and the rarest
/// gets `tail`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LasConfig {
    pub form: SmoothingForm,
    pub head: f64,
    pub tail: f64,
}

impl Default for LasConfig {
    fn default() -> Self {
        LasConfig {
            form: SmoothingForm::Concave,
            head: 0.3,
            tail: 0.0,
        }
    }
}

impl LasConfig {
    pub fn validate(&self) -> Result<()> {
        for v in [self.head, self.tail] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("smoothing bound {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `f(N_y)` for every class.
pub fn las_factors(counts: &[usize], cfg: &LasConfig) -> Result<Vec<f64>> {
    if counts.len() < 2 {
        return Err(Error::Invalid(format!("LAS needs at least 2 classes, got {}", counts.len())));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    cfg.validate()?;
    let as_f: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    Ok(normalize_minmax(&as_f)
        .into_iter()
        .map(|x| cfg.tail + (cfg.head - cfg.tail) * cfg.form.apply(x))
        .collect())
}

/// Target distribution for a true class given its smoothing factor:
/// `1 − f` on the class, `f/(M−1)` elsewhere.
pub fn las_target(class: usize, factor: f64, classes: usize) -> Result<Vec<f64>> {
    if classes < 2 {
        return Err(Error::Invalid("LAS needs at least 2 classes".into()));
    }
    let off = factor / (classes - 1) as f64;
    let mut q = vec![off; classes];
    q[class] = 1.0 - factor;
    Ok(q)
}

/// Row `y` is the smoothed target for samples of class `y`.
pub fn las_targets(counts: &[usize], cfg: &LasConfig) -> Result<Matrix> {
    let m = counts.len();
    let factors = las_factors(counts, cfg)?;
    let mut rows = Vec::with_capacity(m);
    for (y, &f) in factors.iter().enumerate() {
        rows.push(las_target(y, f, m)?);
    }
    Matrix::from_rows(&rows)
}

/// One smoothing-factor update: `clamp((τ·f + R_prev) / 2, 0, 1 − 1e-6)`.
pub fn alas_step(tau: f64, f_out: f64, r_prev: f64) -> f64 {
    ((tau * f_out + r_prev) / 2.0).clamp(0.0, MAX_SMOOTHING)
}

/// Per-class smoothing factors carried across batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingState {
    r: Option<Vec<f64>>,
    updates: u64,
    pub tau: f64,
    pub form: SmoothingForm,
}

/// Per-sample true-class target weight `1 − R_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTargets {
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SmoothedTargets {
    /// Dense `(1 − R_y)·e_y` rows.
    pub fn to_matrix(&self, classes: usize) -> Matrix {
        let mut m = Matrix::zeros(self.labels.len(), classes);
        for (i, (&y, &w)) in self.labels.iter().zip(&self.weights).enumerate() {
            m[(i, y)] = w;
        }
        m
    }
}

impl SmoothingState {
    /// A state with no factors yet; updating it is an error.
    pub fn uninit(tau: f64, form: SmoothingForm) -> Self {
        SmoothingState {
            r: None,
            updates: 0,
            tau,
            form,
        }
    }

    /// `R^0_y = f(N_y)`, clamped into the valid range.
    pub fn new(counts: &[usize], las: &LasConfig, tau: f64, form: SmoothingForm) -> Result<Self> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::Invalid(format!("tau must be >= 0, got {tau}")));
        }
        let r = las_factors(counts, las)?
            .into_iter()
            .map(|v| v.clamp(0.0, MAX_SMOOTHING))
            .collect();
        Ok(SmoothingState {
            r: Some(r),
            updates: 0,
            tau,
            form,
        })
    }

    pub fn factors(&self) -> Option<&[f64]> {
        self.r.as_deref()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Mean `P^A_y(x)` over the samples labelled `y`, `None` for absent classes.
    pub fn class_means(probs: &Matrix, labels: &[usize]) -> Result<Vec<Option<f64>>> {
        if probs.rows() != labels.len() {
            return Err(Error::shape("alas batch", probs.rows(), labels.len()));
        }
        let m = probs.cols();
        let mut sum = vec![0.0; m];
        let mut n = vec![0usize; m];
        for (i, &y) in labels.iter().enumerate() {
            if y >= m {
                return Err(Error::Invalid(format!("label {y} out of range")));
            }
            sum[y] += probs[(i, y)];
            n[y] += 1;
        }
        Ok(sum
            .into_iter()
            .zip(n)
            .map(|(s, k)| (k > 0).then(|| s / k as f64))
            .collect())
    }

    /// Applies one update from per-class means. Present classes are
    /// min–max normalized among themselves before `f`; absent classes keep
    /// their previous factor.
    pub fn update_from_means(&mut self, means: &[Option<f64>]) -> Result<()> {
        let r = self.r.as_mut().ok_or(Error::UninitializedState)?;
        if means.len() != r.len() {
            return Err(Error::shape("alas means", r.len(), means.len()));
        }
        let present: Vec<f64> = means.iter().flatten().copied().collect();
        let normalized = normalize_minmax(&present);
        let mut k = 0;
        for (ry, mean) in r.iter_mut().zip(means) {
            if mean.is_some() {
                *ry = alas_step(self.tau, self.form.apply(normalized[k]), *ry);
                k += 1;
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// Per-batch update from angular probabilities, returning the targets for
    /// that batch.
    pub fn update(&mut self, probs: &Matrix, labels: &[usize]) -> Result<SmoothedTargets> {
        if self.r.is_none() {
            return Err(Error::UninitializedState);
        }
        let means = Self::class_means(probs, labels)?;
        self.update_from_means(&means)?;
        self.targets(labels)
    }

    /// Targets under the current factors, without updating.
    pub fn targets(&self, labels: &[usize]) -> Result<SmoothedTargets> {
        let r = self.r.as_ref().ok_or(Error::UninitializedState)?;
        Ok(SmoothedTargets {
            labels: labels.to_vec(),
            weights: labels.iter().map(|&y| 1.0 - r[y]).collect(),
        })
    }
}

/// Free-function form of [`SmoothingState::update`].
pub fn alas_update(state: &mut SmoothingState, probs: &Matrix, labels: &[usize]) -> Result<SmoothedTargets> {
    state.update(probs, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `−Σ q log p` for any non-negative target rows (one-hot, LAS, mixup,
    /// or the weighted one-hot ALAS rows).
    CrossEntropy,
    /// Cross-entropy plus prediction entropy.
    Aem,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" | "nll" => Ok(LossKind::CrossEntropy),
            "aem" => Ok(LossKind::Aem),
            other => Err(Error::Invalid(format!("unknown loss `{other}`"))),
        }
    }
}

/// Batch-mean loss and its gradient with respect to the logits that feed
/// the softmax.
pub fn loss_grad(kind: LossKind, logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape(
            "loss_grad",
            format!("{:?}", logits.shape()),
            format!("{:?}", targets.shape()),
        ));
    }
    if logits.cols() == 0 {
        return Err(Error::EmptyLogits);
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("loss_grad logits"));
    }
    let n = logits.rows();
    let scale = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut total = 0.0;
    let mut log_p = vec![0.0; logits.cols()];
    for i in 0..n {
        let z = logits.row(i);
        let q = targets.row(i);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (lp, &zi) in log_p.iter_mut().zip(z) {
            *lp = zi - lse;
        }
        let q_sum: f64 = q.iter().sum();
        let ce: f64 = -q.iter().zip(&log_p).map(|(qi, lp)| qi * lp).sum::<f64>();
        let g = grad.row_mut(i);
        for ((gi, &lp), &qi) in g.iter_mut().zip(&log_p).zip(q) {
            *gi = q_sum * lp.exp() - qi;
        }
        let mut loss = ce;
        if kind == LossKind::Aem {
            let h: f64 = -log_p.iter().map(|lp| lp.exp() * lp).sum::<f64>();
            loss += h;
            for (gi, &lp) in g.iter_mut().zip(&log_p) {
                *gi -= lp.exp() * (lp + h);
            }
        }
        total += loss;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total * scale, grad))
}
