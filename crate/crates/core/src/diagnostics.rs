//! Per-class profiles and hardness/accuracy correlation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::angular::PredictionMode;
use crate::calibrate::{abs_apply, CalibrationProfile};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::framework::{mode_logits, mode_probs, EvalReport};
use crate::losses::normalize_minmax;
use crate::model::ModelParams;
use crate::numeric::Matrix;
use crate::prune::PruneScoreTable;

/// One value per class, in class-index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSeries {
    pub kind: String,
    pub values: Vec<f64>,
    /// Whether `values` were min-max normalized to `[0, 1]`.
    pub normalized: bool,
}

impl ProfileSeries {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "class_index,value")?;
        for (c, v) in self.values.iter().enumerate() {
            writeln!(w, "{c},{v:.16e}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// `max / min`, infinite when the minimum is zero.
    pub fn max_min_ratio(&self) -> f64 {
        let max = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    }
}

fn normalized(kind: &str, raw: Vec<f64>) -> ProfileSeries {
    ProfileSeries {
        kind: kind.to_string(),
        values: normalize_minmax(&raw),
        normalized: true,
    }
}

/// Min-max normalized L2 norms of the classifier rows.
pub fn weight_norm_profile(weights: &Matrix) -> ProfileSeries {
    normalized("weight_norm", weights.row_norms())
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    let n = m.rows().max(1) as f64;
    sums.into_iter().map(|s| s / n).collect()
}

/// Min-max normalized mean logit of every class over all samples.
pub fn mean_logit_profile(params: &ModelParams, data: &Dataset, mode: PredictionMode) -> Result<ProfileSeries> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let logits = mode_logits(params, data.features(), mode)?;
    Ok(normalized(&format!("mean_{mode}_logit"), column_means(&logits)))
}

/// Mean predicted probability of every class over all samples, taken from
/// the renormalized corrected scores when a profile is given.
pub fn mean_prob_profile(
    params: &ModelParams,
    data: &Dataset,
    mode: PredictionMode,
    profile: Option<&CalibrationProfile>,
) -> Result<ProfileSeries> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let probs = mode_probs(params, data.features(), mode)?;
    let (kind, probs) = match profile {
        Some(p) => (format!("mean_{mode}_prob_calibrated"), abs_apply(&probs, p)?.normalized),
        None => (format!("mean_{mode}_prob"), probs),
    };
    Ok(ProfileSeries {
        kind,
        values: column_means(&probs),
        normalized: false,
    })
}

/// Largest absolute difference between adjacent entries.
pub fn smoothness(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks. `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessRecord {
    pub per_class_hardness: Vec<f64>,
    pub per_class_accuracy: Vec<f64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Samples that every ensemble member classifies correctly by angular
    /// argmax but whose AVH exceeds `1/M`.
    pub violations: usize,
}

/// Correlates per-class mean hardness with per-class accuracy. Classes
/// without test samples or without scored training samples are skipped.
pub fn hardness_accuracy(table: &PruneScoreTable, report: &EvalReport) -> Result<HardnessRecord> {
    let m = report.per_class.len();
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for (&y, &s) in table.labels.iter().zip(&table.scores) {
        if y >= m {
            return Err(Error::Invalid(format!("label {y} outside {m} classes")));
        }
        sums[y] += s;
        counts[y] += 1;
    }
    let (mut hardness, mut accuracy) = (Vec::new(), Vec::new());
    for c in 0..m {
        if let (Some(acc), true) = (report.per_class[c], counts[c] > 0) {
            hardness.push(sums[c] / counts[c] as f64);
            accuracy.push(acc);
        }
    }
    let bound = 1.0 / m as f64;
    let violations = match &table.consensus_correct {
        Some(ok) => ok.iter().zip(&table.scores).filter(|&(&c, &s)| c && s > bound + 1e-12).count(),
        None => 0,
    };
    Ok(HardnessRecord {
        pearson: pearson(&hardness, &accuracy),
        spearman: spearman(&hardness, &accuracy),
        per_class_hardness: hardness,
        per_class_accuracy: accuracy,
        violations,
    })
}
