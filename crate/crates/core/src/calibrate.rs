//! Test-time bias correction for angular predictions.
//!
//! Angular softmax outputs carry a class-wise offset that grows with the
//! class's training sample count. The profile measures it as the mean
//! predicted probability per class over the training set, maps it onto
//! `[0, 1]` (`F`), and scales test probabilities by `γ = 1 − s·F`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax_tiebreak, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasForm {
    Sine,
    Linear,
}

impl BiasForm {
    fn name(self) -> &'static str {
        match self {
            BiasForm::Sine => "sine",
            BiasForm::Linear => "linear",
        }
    }
}

impl std::str::FromStr for BiasForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(BiasForm::Sine),
            "linear" => Ok(BiasForm::Linear),
            other => Err(Error::Invalid(format!("unknown bias form `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub class_mean_conf: Vec<f64>,
    pub f: Vec<f64>,
    pub s: f64,
    pub form: BiasForm,
    pub gamma: Vec<f64>,
}

/// Mean probability assigned to each class over all rows.
pub fn class_mean_confidence(probs: &Matrix) -> Result<Vec<f64>> {
    if probs.rows() == 0 || probs.cols() == 0 {
        return Err(Error::Empty("training probabilities"));
    }
    let mut m = vec![0.0; probs.cols()];
    for row in probs.row_iter() {
        for (acc, v) in m.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let n = probs.rows() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    Ok(m)
}

/// `F` from the mean confidences: 0 at the least confident class, 1 at the
/// most confident one. Constant input gives all zeros (identity
/// calibration).
pub fn bias_profile(m: &[f64], form: BiasForm) -> Result<Vec<f64>> {
    if m.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("bias_profile"));
    }
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(vec![0.0; m.len()]);
    }
    Ok(m.iter()
        .map(|v| {
            let x = (v - lo) / (hi - lo);
            match form {
                BiasForm::Linear => x,
                BiasForm::Sine => (std::f64::consts::FRAC_PI_2 * x).sin(),
            }
        })
        .collect())
}

impl CalibrationProfile {
    pub fn from_mean_confidence(m: Vec<f64>, form: BiasForm, s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Invalid(format!("s must lie in [0, 1], got {s}")));
        }
        let f = bias_profile(&m, form)?;
        let gamma = f.iter().map(|fc| 1.0 - s * fc).collect();
        Ok(CalibrationProfile {
            class_mean_conf: m,
            f,
            s,
            form,
            gamma,
        })
    }

    /// Builds a profile from softmax outputs on the training set.
    pub fn fit(train_probs: &Matrix, form: BiasForm, s: f64) -> Result<Self> {
        Self::from_mean_confidence(class_mean_confidence(train_probs)?, form, s)
    }

    /// Same `F`, different strength.
    pub fn with_strength(&self, s: f64) -> Result<Self> {
        Self::from_mean_confidence(self.class_mean_conf.clone(), self.form, s)
    }

    pub fn num_classes(&self) -> usize {
        self.gamma.len()
    }

    /// `key=value` sidecar text.
    pub fn to_sidecar(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        writeln!(out, "form={}", self.form.name()).unwrap();
        writeln!(out, "s={:?}", self.s).unwrap();
        writeln!(out, "classes={}", self.num_classes()).unwrap();
        writeln!(out, "class_mean_conf={}", join(&self.class_mean_conf)).unwrap();
        writeln!(out, "f={}", join(&self.f)).unwrap();
        writeln!(out, "gamma={}", join(&self.gamma)).unwrap();
        out
    }

    /// Parses [`to_sidecar`](Self::to_sidecar) output. `F` and `γ` are
    /// recomputed from the stored confidences and checked against the file.
    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut form = None;
        let mut s = None;
        let mut classes = None;
        let mut m = None;
        let mut f = None;
        let mut gamma = None;
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<calibration sidecar>".into(),
            line: line as u64,
            message: msg,
        };
        let floats = |line: usize, v: &str| -> Result<Vec<f64>> {
            v.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| bad(line, format!("bad float `{x}`: {e}"))))
                .collect()
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let (k, v) = raw.split_once('=').ok_or_else(|| bad(line, format!("expected key=value, found `{raw}`")))?;
            match k.trim() {
                "form" => form = Some(v.trim().parse::<BiasForm>()?),
                "s" => s = Some(v.trim().parse::<f64>().map_err(|e| bad(line, e.to_string()))?),
                "classes" => classes = Some(v.trim().parse::<usize>().map_err(|e| bad(line, e.to_string()))?),
                "class_mean_conf" => m = Some(floats(line, v)?),
                "f" => f = Some(floats(line, v)?),
                "gamma" => gamma = Some(floats(line, v)?),
                other => return Err(bad(line, format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| bad(0, format!("missing key `{k}`"));
        let m = m.ok_or_else(|| missing("class_mean_conf"))?;
        let profile = Self::from_mean_confidence(
            m,
            form.ok_or_else(|| missing("form"))?,
            s.ok_or_else(|| missing("s"))?,
        )?;
        if classes.ok_or_else(|| missing("classes"))? != profile.num_classes() {
            return Err(bad(0, "class count disagrees with vectors".into()));
        }
        for (name, stored, derived) in [("f", f, &profile.f), ("gamma", gamma, &profile.gamma)] {
            let stored = stored.ok_or_else(|| missing(name))?;
            if stored.len() != derived.len() || stored.iter().zip(derived).any(|(a, b)| (a - b).abs() > 1e-12) {
                return Err(bad(0, format!("`{name}` disagrees with class_mean_conf")));
            }
        }
        Ok(profile)
    }
}

/// Re-weighted test scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    /// `γ ⊙ p` per row; predictions use these directly.
    pub scores: Matrix,
    /// Scores renormalized to sum to one, for reporting.
    pub normalized: Matrix,
    pub predictions: Vec<usize>,
}

pub fn abs_apply(probs: &Matrix, profile: &CalibrationProfile) -> Result<Calibrated> {
    if probs.cols() != profile.num_classes() {
        return Err(Error::shape("abs_apply", profile.num_classes(), probs.cols()));
    }
    let mut scores = probs.clone();
    let mut normalized = probs.clone();
    let mut predictions = Vec::with_capacity(probs.rows());
    for i in 0..probs.rows() {
        let row = scores.row_mut(i);
        for (v, g) in row.iter_mut().zip(&profile.gamma) {
            *v *= g;
        }
        predictions.push(argmax_tiebreak(row)?);
        let sum: f64 = row.iter().sum();
        let nrow = normalized.row_mut(i);
        nrow.copy_from_slice(scores.row(i));
        if sum > 0.0 {
            nrow.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Ok(Calibrated {
        scores,
        normalized,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{softmax, RngStream};
    use proptest::prelude::*;

    #[test]
    fn mean_confidence_examples() {
        let m = class_mean_confidence(&Matrix::filled(4, 5, 0.2)).unwrap();
        assert!(m.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let m = class_mean_confidence(&Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(m, vec![0.5, 0.5]);
        let m = class_mean_confidence(&Matrix::from_rows(&[vec![0.8, 0.2], vec![0.6, 0.4]]).unwrap()).unwrap();
        assert!((m[0] - 0.7).abs() < 1e-15 && (m[1] - 0.3).abs() < 1e-15);
        assert!(class_mean_confidence(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn bias_profile_examples() {
        let m = [0.3, 0.1, 0.2];
        for form in [BiasForm::Sine, BiasForm::Linear] {
            let f = bias_profile(&m, form).unwrap();
            assert_eq!(f[1], 0.0);
            assert!((f[0] - 1.0).abs() < 1e-15);
        }
        let f = bias_profile(&m, BiasForm::Sine).unwrap();
        assert!((f[2] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let f = bias_profile(&m, BiasForm::Linear).unwrap();
        assert!((f[2] - 0.5).abs() < 1e-12);
        assert_eq!(bias_profile(&[0.2; 3], BiasForm::Sine).unwrap(), vec![0.0; 3]);
        assert!(bias_profile(&[0.2, f64::NAN], BiasForm::Sine).is_err());
    }

    #[test]
    fn abs_apply_examples() {
        let probs = Matrix::from_rows(&[vec![0.6, 0.4]]).unwrap();
        let p0 = CalibrationProfile::from_mean_confidence(vec![0.7, 0.3], BiasForm::Linear, 0.0).unwrap();
        let out = abs_apply(&probs, &p0).unwrap();
        assert_eq!(out.scores, probs);

        let p1 = CalibrationProfile::from_mean_confidence(vec![0.7, 0.3], BiasForm::Linear, 1.0).unwrap();
        let out = abs_apply(&probs, &p1).unwrap();
        assert_eq!(out.scores[(0, 0)], 0.0);
        assert_eq!(out.predictions, vec![1]);

        let p = CalibrationProfile::from_mean_confidence(vec![0.7, 0.3], BiasForm::Linear, 0.25).unwrap();
        assert_eq!(p.gamma, vec![0.75, 1.0]);
        let out = abs_apply(&probs, &p).unwrap();
        assert!((out.scores[(0, 0)] - 0.45).abs() < 1e-15);
        assert!((out.scores[(0, 1)] - 0.4).abs() < 1e-15);
        assert_eq!(out.predictions, vec![0]);
        assert!((out.normalized.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);

        assert!(abs_apply(&Matrix::zeros(1, 3), &p).is_err());
        assert!(CalibrationProfile::from_mean_confidence(vec![0.5, 0.5], BiasForm::Sine, 1.5).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let p = CalibrationProfile::from_mean_confidence(vec![0.31, 0.12, 0.2, 0.37], BiasForm::Sine, 0.25).unwrap();
        let text = p.to_sidecar();
        assert_eq!(CalibrationProfile::from_sidecar(&text).unwrap(), p);
        let tampered = text.replace("s=0.25", "s=0.5");
        assert!(CalibrationProfile::from_sidecar(&tampered).is_err());
        assert!(CalibrationProfile::from_sidecar("form=sine\nbogus=1\n").is_err());
    }

    /// Ranks by descending score, ties to the lower index.
    fn ranking(row: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        idx
    }

    #[test]
    fn tied_rows_reorder_by_bias() {
        let mut rng = RngStream::new(5, 5);
        for _ in 0..200 {
            let m: Vec<f64> = (0..7).map(|_| rng.uniform()).collect();
            let p = CalibrationProfile::from_mean_confidence(m, BiasForm::Sine, 0.3).unwrap();
            let tied = Matrix::filled(1, 7, 1.0 / 7.0);
            let out = abs_apply(&tied, &p).unwrap();
            let after = ranking(out.scores.row(0));
            let mut sorted_f = p.f.clone();
            sorted_f.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = sorted_f[3];
            let pos = |c: usize| after.iter().position(|&k| k == c).unwrap();
            for a in 0..7 {
                for b in 0..7 {
                    if p.f[a] < median && p.f[b] > median {
                        assert!(pos(a) < pos(b));
                    }
                }
            }
            // Every class below the median F beats the median class's rank.
            let median_class = (0..7).find(|&c| p.f[c] == median).unwrap();
            for c in 0..7 {
                if p.f[c] < median {
                    assert!(pos(c) < pos(median_class));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn gamma_bounds_and_antitone(
            m in proptest::collection::vec(0.0f64..1.0, 2..12),
            s in 0.0f64..=1.0,
        ) {
            for form in [BiasForm::Sine, BiasForm::Linear] {
                let p = CalibrationProfile::from_mean_confidence(m.clone(), form, s).unwrap();
                for (a, ga) in p.gamma.iter().enumerate() {
                    prop_assert!(*ga >= 1.0 - s - 1e-15 && *ga <= 1.0);
                    for (b, gb) in p.gamma.iter().enumerate() {
                        if m[a] > m[b] {
                            prop_assert!(ga <= gb);
                        }
                    }
                }
            }
        }

        #[test]
        fn zero_strength_keeps_argmax(
            z in proptest::collection::vec(-5.0f64..5.0, 5),
            m in proptest::collection::vec(0.0f64..1.0, 5),
        ) {
            let probs = Matrix::from_rows(&[softmax(&z).unwrap()]).unwrap();
            let p = CalibrationProfile::from_mean_confidence(m, BiasForm::Sine, 0.0).unwrap();
            let out = abs_apply(&probs, &p).unwrap();
            prop_assert_eq!(&out.scores, &probs);
            prop_assert_eq!(out.predictions[0], argmax_tiebreak(probs.row(0)).unwrap());
        }
    }
}
