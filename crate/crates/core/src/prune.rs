//! Sample scoring (EL2N, AVH) and pruning plans.
//!
//! Scores are averaged over a small ensemble trained for a few epochs with
//! cross-entropy. Both scores grow with hardness: EL2N is the distance of the
//! linear softmax from the one-hot label, AVH is the true-class angle's share
//! of the summed class angles.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::angular::angles_lenient;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::framework::{derive_seed, init_model, mode_probs, stage_one, ExperimentConfig, Stage1Config, Stage1Kind, TrainSeeds};
use crate::model::{ModelParams, ModelSpec};
use crate::numeric::{argmax_tiebreak, norm, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMetric {
    Random,
    ClassRandom,
    El2n,
    Avh,
}

impl std::fmt::Display for PruneMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PruneMetric::Random => "random",
            PruneMetric::ClassRandom => "class_random",
            PruneMetric::El2n => "el2n",
            PruneMetric::Avh => "avh",
        })
    }
}

impl std::str::FromStr for PruneMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PruneMetric::Random),
            "class_random" | "classwise_random" => Ok(PruneMetric::ClassRandom),
            "el2n" => Ok(PruneMetric::El2n),
            "avh" => Ok(PruneMetric::Avh),
            other => Err(Error::Invalid(format!("unknown prune metric `{other}`"))),
        }
    }
}

/// Which end of the score ordering is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneDirection {
    DropLowest,
    DropHighest,
}

impl std::str::FromStr for PruneDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" | "drop_lowest" => Ok(PruneDirection::DropLowest),
            "high" | "drop_highest" => Ok(PruneDirection::DropHighest),
            other => Err(Error::Invalid(format!("unknown prune direction `{other}`"))),
        }
    }
}

/// One score per training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneScoreTable {
    pub metric: PruneMetric,
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    /// Ensemble size.
    pub k: usize,
    /// Epochs per ensemble member.
    pub epochs: usize,
    /// Per sample: every member's angular argmax is correct (AVH only).
    pub consensus_correct: Option<Vec<bool>>,
}

impl PruneScoreTable {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        for (i, (&y, &s)) in self.labels.iter().zip(&self.scores).enumerate() {
            writeln!(w, "{i},{y},{s:.16e},{},{},{}", self.metric, self.k, self.epochs)?;
        }
        Ok(())
    }
}

pub const SCORES_HEADER: &str = "sample_index,label,score,metric,k,e";

/// Writes several tables into one CSV.
pub fn save_scores_csv(tables: &[&PruneScoreTable], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{SCORES_HEADER}")?;
    for t in tables {
        t.write_csv(&mut f)?;
    }
    f.flush()?;
    Ok(())
}

fn check_members(n: usize, members: &[Matrix], labels: &[usize]) -> Result<usize> {
    let first = members.first().ok_or(Error::Empty("ensemble"))?;
    let m = first.cols();
    for x in members {
        if x.shape() != (n, m) {
            return Err(Error::shape("ensemble member output", format!("{n}x{m}"), format!("{:?}", x.shape())));
        }
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::Invalid(format!("label {y} outside {m} classes")));
    }
    Ok(m)
}

/// Mean over members of `‖softmax − onehot‖₂`, from per-member probabilities.
pub fn el2n_score(member_probs: &[Matrix], labels: &[usize]) -> Result<Vec<f64>> {
    let n = labels.len();
    check_members(n, member_probs, labels)?;
    let k = member_probs.len() as f64;
    let mut out = vec![0.0; n];
    for probs in member_probs {
        for (i, (o, &y)) in out.iter_mut().zip(labels).enumerate() {
            let mut row = probs.row(i).to_vec();
            row[y] -= 1.0;
            *o += norm(&row);
        }
    }
    Ok(out.into_iter().map(|s| s / k).collect())
}

/// Mean over members of `A_y / Σ_i A_i`, from per-member angles.
pub fn avh_score(member_angles: &[Matrix], labels: &[usize]) -> Result<Vec<f64>> {
    let n = labels.len();
    check_members(n, member_angles, labels)?;
    let k = member_angles.len() as f64;
    let mut out = vec![0.0; n];
    for a in member_angles {
        for (i, (o, &y)) in out.iter_mut().zip(labels).enumerate() {
            let row = a.row(i);
            let total: f64 = row.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Invalid(format!("sample {i}: angle row sums to {total}")));
            }
            *o += row[y] / total;
        }
    }
    Ok(out.into_iter().map(|s| s / k).collect())
}

/// Sorted indices of the kept samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub fraction: f64,
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
}

impl PrunePlan {
    fn from_kept(fraction: f64, n: usize, mut kept: Vec<usize>) -> Self {
        kept.sort_unstable();
        let mut keep = vec![false; n];
        for &i in &kept {
            keep[i] = true;
        }
        let removed = (0..n).filter(|&i| !keep[i]).collect();
        PrunePlan { fraction, kept, removed }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        ds.subset(&self.kept)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&f) {
        return Err(Error::Invalid(format!("prune fraction must lie in [0, 1), got {f}")));
    }
    Ok(())
}

/// `round((1 − f) · n)`, half away from zero.
pub fn kept_count(n: usize, f: f64) -> usize {
    ((1.0 - f) * n as f64).round() as usize
}

/// Removes `n − round((1 − f)n)` samples from one end of the ordering by
/// score, ties broken by sample index.
pub fn prune_by_score(scores: &[f64], fraction: f64, direction: PruneDirection) -> Result<PrunePlan> {
    check_fraction(fraction)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("prune score"));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    match direction {
        PruneDirection::DropLowest => order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
        PruneDirection::DropHighest => order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
    }
    let drop = n - kept_count(n, fraction);
    Ok(PrunePlan::from_kept(fraction, n, order[drop..].to_vec()))
}

/// Uniformly random removal of `n − round((1 − f)n)` samples.
pub fn random_prune(n: usize, fraction: f64, seed: u64) -> Result<PrunePlan> {
    check_fraction(fraction)?;
    let mut rng = RngStream::named(seed, "prune-random", 0);
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    order.truncate(kept_count(n, fraction));
    Ok(PrunePlan::from_kept(fraction, n, order))
}

/// Random removal of the fraction within every class. Each non-empty class
/// keeps at least one sample; the warnings name classes where that floor
/// overrode the fraction.
pub fn classwise_random_prune(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<(PrunePlan, Vec<String>)> {
    check_fraction(fraction)?;
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| Error::Invalid(format!("label {y} outside {classes} classes")))?
            .push(i);
    }
    let mut kept = Vec::new();
    let mut warnings = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let mut rng = RngStream::named(seed, "prune-class-random", c as u64);
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let target = kept_count(idx.len(), fraction);
        if target == 0 {
            warnings.push(format!("class {c}: keeping 1 of {} samples instead of 0", idx.len()));
            log::warn!("class {c}: keeping 1 of {} samples instead of 0", idx.len());
        }
        idx.truncate(target.max(1));
        kept.extend(idx);
    }
    Ok((PrunePlan::from_kept(fraction, labels.len(), kept), warnings))
}

/// Ensemble used to score samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub k: usize,
    pub epochs: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { k: 5, epochs: 10 }
    }
}

/// Member `j` of an ensemble rooted at `seed`.
pub fn member_seed(seed: u64, j: usize) -> u64 {
    derive_seed(seed, "ensemble", j as u64)
}

/// Trains `k` members for `epochs` epochs of cross-entropy on instance
/// uniform batches, in parallel, in member-seed order.
pub fn train_ensemble(
    train: &Dataset,
    model: &ModelSpec,
    stage1: &Stage1Config,
    ens: &EnsembleConfig,
    seed: u64,
) -> Result<Vec<ModelParams>> {
    if ens.k == 0 {
        return Err(Error::Invalid("ensemble size must be > 0".into()));
    }
    let cfg = Stage1Config {
        kind: Stage1Kind::Ce,
        epochs: ens.epochs,
        angular_ce: false,
        ..stage1.clone()
    };
    (0..ens.k)
        .into_par_iter()
        .map(|j| {
            let seeds = TrainSeeds::from_root(member_seed(seed, j));
            let mut params = init_model(model, train, seeds.init)?;
            stage_one(&mut params, train, &cfg, seeds)?;
            Ok(params)
        })
        .collect()
}

/// EL2N or AVH table from trained members.
pub fn score_with_members(metric: PruneMetric, members: &[ModelParams], train: &Dataset, epochs: usize) -> Result<PruneScoreTable> {
    let labels = train.labels();
    let (scores, consensus) = match metric {
        PruneMetric::El2n => {
            let probs = members
                .iter()
                .map(|p| mode_probs(p, train.features(), crate::angular::PredictionMode::Linear))
                .collect::<Result<Vec<_>>>()?;
            (el2n_score(&probs, labels)?, None)
        }
        PruneMetric::Avh => {
            let angles = members
                .iter()
                .map(|p| Ok(angles_lenient(&p.features(train.features())?, p.classifier())?.angles))
                .collect::<Result<Vec<_>>>()?;
            let mut ok = vec![true; labels.len()];
            for a in &angles {
                for (i, o) in ok.iter_mut().enumerate() {
                    let logits: Vec<f64> = a.row(i).iter().map(|t| PI - t).collect();
                    *o &= argmax_tiebreak(&logits)? == labels[i];
                }
            }
            (avh_score(&angles, labels)?, Some(ok))
        }
        other => return Err(Error::Invalid(format!("`{other}` is not a score metric"))),
    };
    Ok(PruneScoreTable {
        metric,
        scores,
        labels: labels.to_vec(),
        k: members.len(),
        epochs,
        consensus_correct: consensus,
    })
}

/// Trains the ensemble and scores every training sample.
pub fn ensemble_protocol(
    metric: PruneMetric,
    train: &Dataset,
    model: &ModelSpec,
    stage1: &Stage1Config,
    ens: &EnsembleConfig,
    seed: u64,
) -> Result<PruneScoreTable> {
    let members = train_ensemble(train, model, stage1, ens, seed)?;
    score_with_members(metric, &members, train, ens.epochs)
}

/// Plan for any metric. Score tables are required for EL2N and AVH.
pub fn plan_for(
    metric: PruneMetric,
    train: &Dataset,
    table: Option<&PruneScoreTable>,
    fraction: f64,
    direction: PruneDirection,
    seed: u64,
) -> Result<PrunePlan> {
    match metric {
        PruneMetric::Random => random_prune(train.len(), fraction, seed),
        PruneMetric::ClassRandom => Ok(classwise_random_prune(train.labels(), train.num_classes(), fraction, seed)?.0),
        PruneMetric::El2n | PruneMetric::Avh => {
            let t = table.ok_or_else(|| Error::Invalid(format!("no score table for `{metric}`")))?;
            if t.scores.len() != train.len() {
                return Err(Error::shape("score table", train.len(), t.scores.len()));
            }
            prune_by_score(&t.scores, fraction, direction)
        }
    }
}

/// Pruning sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub metrics: Vec<PruneMetric>,
    pub fractions: Vec<f64>,
    pub direction: PruneDirection,
    pub ensemble: EnsembleConfig,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            metrics: vec![PruneMetric::Random, PruneMetric::ClassRandom, PruneMetric::El2n, PruneMetric::Avh],
            fractions: vec![0.0, 0.1, 0.3],
            direction: PruneDirection::DropLowest,
            ensemble: EnsembleConfig::default(),
        }
    }
}

/// Accuracy after pruning and retraining, for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePoint {
    pub seed: u64,
    pub metric: PruneMetric,
    pub fraction: f64,
    pub kept: usize,
    pub overall: f64,
    pub head: Option<f64>,
    pub mid: Option<f64>,
    pub tail: Option<f64>,
}

/// Scores, prunes and retrains one seed over the configured metrics and
/// fractions. Retraining is stage one only (pruning may empty a class,
/// which the class-balanced stream rejects) followed by evaluation in the
/// configured mode without post-hoc correction.
pub fn pruning_curve(cfg: &ExperimentConfig, prune: &PruneConfig) -> Result<(Vec<PrunePoint>, Vec<PruneScoreTable>)> {
    let (train, test) = cfg.data.build(cfg.seed)?;
    let mut retrain = cfg.clone();
    retrain.stage2.kind = crate::framework::Stage2Kind::None;
    retrain.posthoc.kind = crate::framework::PosthocKind::None;
    let resolved = retrain.resolve(train.num_classes())?;
    let groups = resolved.group_spec(train.num_classes())?;
    let needs_members = prune.metrics.iter().any(|m| matches!(m, PruneMetric::El2n | PruneMetric::Avh));
    let members = if needs_members {
        train_ensemble(&train, &cfg.model, &cfg.stage1, &prune.ensemble, cfg.seed)?
    } else {
        Vec::new()
    };
    let mut tables = Vec::new();
    for &metric in &prune.metrics {
        if matches!(metric, PruneMetric::El2n | PruneMetric::Avh) && !tables.iter().any(|t: &PruneScoreTable| t.metric == metric) {
            tables.push(score_with_members(metric, &members, &train, prune.ensemble.epochs)?);
        }
    }
    let jobs: Vec<(PruneMetric, f64)> = prune
        .metrics
        .iter()
        .flat_map(|&m| prune.fractions.iter().map(move |&f| (m, f)))
        .collect();
    let plan_seed = derive_seed(cfg.seed, "prune", 0);
    let points = jobs
        .par_iter()
        .map(|&(metric, fraction)| {
            let table = tables.iter().find(|t| t.metric == metric);
            let plan = plan_for(metric, &train, table, fraction, prune.direction, plan_seed)?;
            let pruned = plan.apply(&train);
            let (_, model, _, _) = crate::framework::train_pipeline(&resolved, &pruned)?;
            let report = crate::framework::evaluate(&model, &test, resolved.eval_mode(), None, &groups)?;
            Ok(PrunePoint {
                seed: cfg.seed,
                metric,
                fraction,
                kept: plan.kept.len(),
                overall: report.overall,
                head: report.head,
                mid: report.mid,
                tail: report.tail,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((points, tables))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::angular::{angles, angular_logits};
    use crate::numeric::softmax_rows;
    use proptest::prelude::*;

    #[test]
    fn el2n_examples() {
        let p = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let s = el2n_score(&[p], &[0, 0]).unwrap();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 2f64.sqrt()).abs() < 1e-15);
        let u = Matrix::filled(1, 4, 0.25);
        let s = el2n_score(&[u], &[2]).unwrap();
        assert!((s[0] - (0.75f64 * 0.75 + 3.0 * 0.0625).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn avh_examples() {
        let a = Matrix::from_rows(&[vec![PI / 3.0, 2.0 * PI / 3.0]]).unwrap();
        let s = avh_score(&[a], &[0]).unwrap();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-12);
        let eq = Matrix::filled(1, 10, 1.2);
        assert!((avh_score(&[eq], &[4]).unwrap()[0] - 0.1).abs() < 1e-12);
        // Feature on W_0 with orthogonal W_1, W_2: angles (0, π/2, π/2).
        let phi = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let a = angles(&phi, &Matrix::identity(3)).unwrap().angles;
        assert!(avh_score(&[a.clone()], &[0]).unwrap()[0].abs() < 1e-12);
        assert!((avh_score(&[a], &[1]).unwrap()[0] - 0.5).abs() < 1e-12);
        assert!(avh_score(&[Matrix::zeros(1, 3)], &[0]).is_err());
        assert!(el2n_score(&[], &[0]).is_err());
    }

    #[test]
    fn spec_plan_examples() {
        let plan = prune_by_score(&[0.1, 0.9, 0.5], 1.0 / 3.0, PruneDirection::DropLowest).unwrap();
        assert_eq!(plan.kept, vec![1, 2]);
        let mut labels = vec![0; 100];
        labels.extend(vec![1; 10]);
        let (plan, warnings) = classwise_random_prune(&labels, 2, 0.5, 3).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(plan.kept.iter().filter(|&&i| labels[i] == 0).count(), 50);
        assert_eq!(plan.kept.iter().filter(|&&i| labels[i] == 1).count(), 5);
        assert_eq!(random_prune(7, 0.0, 1).unwrap().kept, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn ensemble_mean_matches_single_tables() {
        let a = Matrix::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.4, 0.4, 0.2]]).unwrap();
        let labels = [0, 2];
        let s1 = el2n_score(&[a.clone()], &labels).unwrap();
        let s2 = el2n_score(&[b.clone()], &labels).unwrap();
        let both = el2n_score(&[a.clone(), b.clone()], &labels).unwrap();
        for i in 0..2 {
            assert!((both[i] - (s1[i] + s2[i]) / 2.0).abs() < 1e-15);
        }
        let (a, b) = (a.map(|v| v + 0.1), b.map(|v| v + 0.1));
        let v1 = avh_score(&[a.clone()], &labels).unwrap();
        let v2 = avh_score(&[b.clone()], &labels).unwrap();
        let vb = avh_score(&[a, b], &labels).unwrap();
        for i in 0..2 {
            assert!((vb[i] - (v1[i] + v2[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_scores_remove_lowest_indices() {
        let plan = prune_by_score(&[0.5; 10], 0.3, PruneDirection::DropLowest).unwrap();
        assert_eq!(plan.removed, vec![0, 1, 2]);
        assert_eq!(plan.kept, (3..10).collect::<Vec<_>>());
        let plan = prune_by_score(&[0.5; 10], 0.3, PruneDirection::DropHighest).unwrap();
        assert_eq!(plan.removed, vec![0, 1, 2]);
    }

    #[test]
    fn direction_selects_the_end() {
        let scores = [0.3, 0.1, 0.9, 0.5];
        let low = prune_by_score(&scores, 0.5, PruneDirection::DropLowest).unwrap();
        assert_eq!(low.kept, vec![2, 3]);
        let high = prune_by_score(&scores, 0.5, PruneDirection::DropHighest).unwrap();
        assert_eq!(high.kept, vec![0, 1]);
        let none = prune_by_score(&scores, 0.0, PruneDirection::DropLowest).unwrap();
        assert_eq!(none.kept, vec![0, 1, 2, 3]);
        assert!(prune_by_score(&scores, 1.0, PruneDirection::DropLowest).is_err());
        assert!(prune_by_score(&[0.1, f64::NAN], 0.5, PruneDirection::DropLowest).is_err());
    }

    #[test]
    fn classwise_keeps_one_per_class() {
        let labels = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 2, 2];
        let (plan, warnings) = classwise_random_prune(&labels, 4, 0.9, 7).unwrap();
        let kept_labels: Vec<usize> = plan.kept.iter().map(|&i| labels[i]).collect();
        for c in 0..3 {
            assert!(kept_labels.contains(&c));
        }
        assert_eq!(kept_labels.iter().filter(|&&y| y == 0).count(), 1);
        assert_eq!(warnings.len(), 2);
    }

    #[test]
    fn random_prune_is_seeded() {
        let a = random_prune(50, 0.3, 1).unwrap();
        assert_eq!(a, random_prune(50, 0.3, 1).unwrap());
        assert_ne!(a, random_prune(50, 0.3, 2).unwrap());
        assert_eq!(a.kept.len(), 35);
    }

    #[test]
    fn scores_csv_format() {
        let t = PruneScoreTable {
            metric: PruneMetric::Avh,
            scores: vec![0.25],
            labels: vec![3],
            k: 2,
            epochs: 4,
            consensus_correct: None,
        };
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0,3,2.5000000000000000e-1,avh,2,4\n");
    }

    #[test]
    fn correct_angular_argmax_bounds_avh() {
        let mut rng = RngStream::new(11, 0);
        let phi = Matrix::from_vec(40, 5, (0..200).map(|_| rng.uniform() * 2.0 - 1.0).collect()).unwrap();
        let w = Matrix::from_vec(4, 5, (0..20).map(|_| rng.uniform() * 2.0 - 1.0).collect()).unwrap();
        let logits = angular_logits(&phi, &w).unwrap().values;
        let a = angles(&phi, &w).unwrap().angles;
        let labels: Vec<usize> = logits.row_iter().map(|r| argmax_tiebreak(r).unwrap()).collect();
        let s = avh_score(&[a], &labels).unwrap();
        assert!(s.iter().all(|&v| v > 0.0 && v <= 0.25 + 1e-12));
    }

    proptest! {
        #[test]
        fn kept_size_and_subset(scores in proptest::collection::vec(0.0f64..1.0, 1..60), f in 0.0f64..0.99) {
            for dir in [PruneDirection::DropLowest, PruneDirection::DropHighest] {
                let plan = prune_by_score(&scores, f, dir).unwrap();
                prop_assert_eq!(plan.kept.len(), kept_count(scores.len(), f));
                prop_assert!(plan.kept.windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(plan.kept.len() + plan.removed.len(), scores.len());
            }
        }

        #[test]
        fn el2n_range(rows in proptest::collection::vec(proptest::collection::vec(-4.0f64..4.0, 3), 1..10), y in 0usize..3) {
            let p = softmax_rows(&Matrix::from_rows(&rows).unwrap()).unwrap();
            let labels = vec![y; rows.len()];
            for s in el2n_score(&[p], &labels).unwrap() {
                prop_assert!((0.0..=2f64.sqrt() + 1e-12).contains(&s));
            }
        }
    }
}
