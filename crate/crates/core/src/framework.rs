//! Two-stage training pipeline and evaluation.
//!
//! Stage one trains extractor and classifier on the long-tailed set with
//! cross-entropy (optionally with mixup) or with angular entropy
//! minimization. Stage two freezes the extractor and finetunes the head on a
//! class-balanced stream, either with LAS targets and an LWS vector or with
//! the batch-adaptive ALAS targets through angular logits. Any model can be
//! evaluated with linear, angular or LWS logits, optionally after the
//! angular bias correction.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::angular::{angular_logits_lenient, angular_logits_train, PredictionMode};
use crate::calibrate::{abs_apply, BiasForm, CalibrationProfile};
use crate::dataset::{
    epoch_permutation, group_split, load_csv, mixup, synth_gaussian_balanced, synth_gaussian_lt,
    ClassBalancedStream, Dataset, GroupSpec, LtSpec, SynthSpec,
};
use crate::diagnostics::{self, ProfileSeries};
use crate::error::{Error, Result};
use crate::losses::{las_targets, loss_grad, LasConfig, LossKind, SmoothingForm, SmoothingState};
use crate::model::{apply_freeze, sgd_step, FreezeMask, ModelParams, ModelSpec, OptState, Upstream};
use crate::numeric::{argmax_tiebreak, softmax_rows, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Kind {
    Ce,
    CeMixup,
    Aem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Kind {
    None,
    LasLws,
    Alas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosthocKind {
    None,
    Abs,
}

/// When the ALAS factors are refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlasGranularity {
    Batch,
    Epoch,
}

/// Dataset source: the Gaussian-cluster generator, or CSV files when both
/// paths are set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dim: usize,
    pub classes: usize,
    pub imbalance: f64,
    /// Size of the largest class.
    pub n_max: usize,
    pub radius: f64,
    pub noise: f64,
    pub test_per_class: usize,
    /// Overrides the root seed for data generation.
    pub seed: Option<u64>,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dim: 20,
            classes: 10,
            imbalance: 100.0,
            n_max: 500,
            radius: 2.5,
            noise: 1.0,
            test_per_class: 200,
            seed: None,
            train_csv: None,
            test_csv: None,
        }
    }
}

impl DataConfig {
    pub fn synth_spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            dim: self.dim,
            radius: self.radius,
            noise: self.noise,
            lt: LtSpec {
                total: self.n_max * self.classes,
                classes: self.classes,
                imbalance: self.imbalance,
            },
            seed: self.seed.unwrap_or(seed),
        }
    }

    /// `(train, test)`.
    pub fn build(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match (&self.train_csv, &self.test_csv) {
            (Some(train), Some(test)) => {
                let train = load_csv(train)?;
                let test = load_csv(test)?;
                let m = train.num_classes().max(test.num_classes());
                let widen = |d: Dataset| Dataset::new(d.name().to_string(), d.features().clone(), d.labels().to_vec(), m);
                Ok((widen(train)?, widen(test)?))
            }
            (None, None) => {
                let spec = self.synth_spec(seed);
                Ok((
                    synth_gaussian_lt(&spec)?,
                    synth_gaussian_balanced(&spec, self.test_per_class, "test-samples")?,
                ))
            }
            _ => Err(Error::Config {
                path: "data".into(),
                message: "train_csv and test_csv must be given together".into(),
            }),
        }
    }
}

/// SGD settings plus the step schedule (one ×`lr_drop_factor` drop at
/// `lr_drop_at` of the epochs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
}

impl OptimSettings {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drop = (self.lr_drop_at * self.epochs as f64).floor() as usize;
        if self.epochs > 0 && epoch >= drop {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        let bad = |msg: String| Error::Config {
            path: path.to_string(),
            message: msg,
        };
        if self.batch_size == 0 {
            return Err(bad("batch_size must be > 0".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(bad(format!(
                "bad optimizer settings lr={} momentum={} weight_decay={}",
                self.lr, self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub kind: Stage1Kind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    pub mixup_alpha: f64,
    /// Train cross-entropy through the angular softmax instead of the
    /// linear one (ignored for `aem`, which always uses angular logits).
    pub angular_ce: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            kind: Stage1Kind::Ce,
            epochs: 100,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_at: 0.8,
            lr_drop_factor: 0.1,
            mixup_alpha: 1.0,
            angular_ce: false,
        }
    }
}

impl Stage1Config {
    pub fn optim(&self) -> OptimSettings {
        OptimSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_drop_at: self.lr_drop_at,
            lr_drop_factor: self.lr_drop_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub kind: Stage2Kind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    pub tau: f64,
    pub form: SmoothingForm,
    pub granularity: AlasGranularity,
    pub las: LasConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            kind: Stage2Kind::None,
            epochs: 30,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_at: 0.8,
            lr_drop_factor: 0.1,
            tau: 0.75,
            form: SmoothingForm::Concave,
            granularity: AlasGranularity::Batch,
            las: LasConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn optim(&self) -> OptimSettings {
        OptimSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_drop_at: self.lr_drop_at,
            lr_drop_factor: self.lr_drop_factor,
        }
    }
}

/// Post-hoc correction. Unset `s`/`form` resolve to sine with `s = 0.25`
/// for up to 10 classes and linear with `s = 0.1` above that.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosthocConfig {
    pub kind: PosthocKind,
    pub s: Option<f64>,
    pub form: Option<BiasForm>,
}

impl Default for PosthocConfig {
    fn default() -> Self {
        PosthocConfig {
            kind: PosthocKind::None,
            s: None,
            form: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Defaults to `lws` after LAS+LWS finetuning, `angular` otherwise.
    pub mode: Option<PredictionMode>,
    /// Head/mid/tail as `[[start, end], [start, end], [start, end]]`.
    pub groups: Option<[[usize; 2]; 3]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub posthoc: PosthocConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Fills every optional field with its effective value and validates.
    pub fn resolve(&self, classes: usize) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        self.stage1.optim().validate("stage1")?;
        self.stage2.optim().validate("stage2")?;
        if !(cfg.stage1.mixup_alpha > 0.0) {
            return Err(Error::Config {
                path: "stage1.mixup_alpha".into(),
                message: "must be > 0".into(),
            });
        }
        if !(cfg.stage2.tau >= 0.0) {
            return Err(Error::Config {
                path: "stage2.tau".into(),
                message: "must be >= 0".into(),
            });
        }
        cfg.stage2.las.validate().map_err(|e| Error::Config {
            path: "stage2.las".into(),
            message: e.to_string(),
        })?;
        if cfg.eval.mode.is_none() {
            cfg.eval.mode = Some(match cfg.stage2.kind {
                Stage2Kind::LasLws => PredictionMode::Lws,
                _ => PredictionMode::Angular,
            });
        }
        if cfg.eval.mode == Some(PredictionMode::Lws) && cfg.stage2.kind != Stage2Kind::LasLws {
            return Err(Error::Config {
                path: "eval.mode".into(),
                message: "lws evaluation needs stage2.kind = \"las_lws\"".into(),
            });
        }
        let (form, s) = if classes <= 10 {
            (BiasForm::Sine, 0.25)
        } else {
            (BiasForm::Linear, 0.1)
        };
        cfg.posthoc.form.get_or_insert(form);
        let s = *cfg.posthoc.s.get_or_insert(s);
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Config {
                path: "posthoc.s".into(),
                message: format!("must lie in [0, 1], got {s}"),
            });
        }
        if cfg.eval.groups.is_none() {
            let g = GroupSpec::default_for(classes)?;
            cfg.eval.groups = Some([[g.head.start, g.head.end], [g.mid.start, g.mid.end], [g.tail.start, g.tail.end]]);
        }
        cfg.group_spec(classes)?;
        Ok(cfg)
    }

    pub fn group_spec(&self, classes: usize) -> Result<GroupSpec> {
        match self.eval.groups {
            Some([h, m, t]) => group_split(classes, [h[0]..h[1], m[0]..m[1], t[0]..t[1]]).map_err(|e| Error::Config {
                path: "eval.groups".into(),
                message: e.to_string(),
            }),
            None => GroupSpec::default_for(classes),
        }
    }

    pub fn eval_mode(&self) -> PredictionMode {
        self.eval.mode.unwrap_or(PredictionMode::Angular)
    }
}

/// Named seeds derived from one root seed.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    RngStream::named(root, name, index).next_raw()
}

fn check_finite(loss: f64, params: &ModelParams, epoch: usize) -> Result<()> {
    if !loss.is_finite() || params.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged { epoch, loss });
    }
    Ok(())
}

/// Loss + backward + SGD on one batch.
fn train_batch(
    params: &mut ModelParams,
    opt: &mut OptState,
    x: &Matrix,
    targets: &Matrix,
    loss: LossKind,
    head: PredictionMode,
) -> Result<f64> {
    let fwd = params.forward(x)?;
    let (value, grads) = match head {
        PredictionMode::Linear => {
            let (l, g) = loss_grad(loss, &fwd.linear_logits, targets)?;
            (l, params.backward(&fwd, Upstream::Linear(&g))?)
        }
        PredictionMode::Lws => {
            let logits = fwd.lws_logits.as_ref().ok_or(Error::MissingLwsScale)?;
            let (l, g) = loss_grad(loss, logits, targets)?;
            (l, params.backward(&fwd, Upstream::Lws(&g))?)
        }
        PredictionMode::Angular => {
            let logits = angular_logits_train(&fwd.features, params.classifier())?;
            let (l, g) = loss_grad(loss, &logits, targets)?;
            (l, params.backward(&fwd, Upstream::Angular(&g))?)
        }
    };
    if value.is_finite() {
        sgd_step(params, &grads, opt)?;
    }
    Ok(value)
}

/// Training seeds for one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSeeds {
    pub init: u64,
    pub batch: u64,
    pub mixup: u64,
}

impl TrainSeeds {
    pub fn from_root(root: u64) -> Self {
        TrainSeeds {
            init: derive_seed(root, "init", 0),
            batch: derive_seed(root, "batch", 0),
            mixup: derive_seed(root, "mixup", 0),
        }
    }
}

pub fn init_model(spec: &ModelSpec, train: &Dataset, seed: u64) -> Result<ModelParams> {
    let mut rng = RngStream::named(seed, "init", 0);
    ModelParams::init(spec, train.dim(), train.num_classes(), &mut rng)
}

/// Stage one on the long-tailed set with instance-uniform batches.
/// Returns the mean loss of every epoch.
pub fn stage_one(
    params: &mut ModelParams,
    train: &Dataset,
    cfg: &Stage1Config,
    seeds: TrainSeeds,
) -> Result<Vec<f64>> {
    let optim = cfg.optim();
    optim.validate("stage1")?;
    let mut opt = OptState::new(params, optim.lr, optim.momentum, optim.weight_decay);
    let mut batch_rng = RngStream::named(seeds.batch, "batch", 0);
    let mut mix_rng = RngStream::named(seeds.mixup, "mixup", 0);
    let targets_all = train.one_hot();
    let (loss, head) = match cfg.kind {
        Stage1Kind::Aem => (LossKind::Aem, PredictionMode::Angular),
        _ if cfg.angular_ce => (LossKind::CrossEntropy, PredictionMode::Angular),
        _ => (LossKind::CrossEntropy, PredictionMode::Linear),
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = optim.lr_at(epoch);
        let order = epoch_permutation(train.len(), &mut batch_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(optim.batch_size) {
            let mut x = train.features().select_rows(chunk);
            let mut q = targets_all.select_rows(chunk);
            if cfg.kind == Stage1Kind::CeMixup {
                let partner = epoch_permutation(chunk.len(), &mut mix_rng);
                let xb = x.select_rows(&partner);
                let qb = q.select_rows(&partner);
                let mixed = mixup((&x, &q), (&xb, &qb), cfg.mixup_alpha, &mut mix_rng)?;
                x = mixed.features;
                q = mixed.targets;
            }
            let l = train_batch(params, &mut opt, &x, &q, loss, head)?;
            check_finite(l, params, epoch)?;
            total += l;
            batches += 1;
        }
        history.push(if batches > 0 { total / batches as f64 } else { 0.0 });
    }
    Ok(history)
}

/// Stage two: freeze the extractor and finetune the head on a
/// class-balanced stream. `Stage2Kind::None` leaves the model untouched.
pub fn stage_two(
    params: &mut ModelParams,
    train: &Dataset,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Vec<f64>> {
    if cfg.kind == Stage2Kind::None {
        return Ok(Vec::new());
    }
    let optim = cfg.optim();
    optim.validate("stage2")?;
    match cfg.kind {
        Stage2Kind::LasLws => params.set_lws_scale(Some(vec![1.0; params.num_classes()]))?,
        _ => params.set_lws_scale(None)?,
    }
    apply_freeze(params, &FreezeMask::extractor(params))?;
    let mut opt = OptState::new(params, optim.lr, optim.momentum, optim.weight_decay);
    let mut stream = ClassBalancedStream::new(train, derive_seed(seed, "balanced", 0))?;
    let m = train.num_classes();
    let las = las_targets(train.class_counts(), &cfg.las)?;
    let mut state = SmoothingState::new(train.class_counts(), &cfg.las, cfg.tau, cfg.form)?;
    let labels = train.labels();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = optim.lr_at(epoch);
        if cfg.kind == Stage2Kind::Alas && cfg.granularity == AlasGranularity::Epoch {
            let feats = params.features(train.features())?;
            let probs = softmax_rows(&angular_logits_train(&feats, params.classifier())?)?;
            let means = SmoothingState::class_means(&probs, labels)?;
            state.update_from_means(&means)?;
        }
        let draws: Vec<usize> = stream.by_ref().take(train.len()).collect();
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in draws.chunks(optim.batch_size) {
            let x = train.features().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let l = match cfg.kind {
                Stage2Kind::LasLws => {
                    let q = las.select_rows(&y);
                    train_batch(params, &mut opt, &x, &q, LossKind::CrossEntropy, PredictionMode::Lws)?
                }
                Stage2Kind::Alas => {
                    let targets = if cfg.granularity == AlasGranularity::Batch {
                        let feats = params.features(&x)?;
                        let probs = softmax_rows(&angular_logits_train(&feats, params.classifier())?)?;
                        state.update(&probs, &y)?
                    } else {
                        state.targets(&y)?
                    };
                    let q = targets.to_matrix(m);
                    train_batch(params, &mut opt, &x, &q, LossKind::CrossEntropy, PredictionMode::Angular)?
                }
                Stage2Kind::None => unreachable!(),
            };
            check_finite(l, params, epoch)?;
            total += l;
            batches += 1;
        }
        history.push(if batches > 0 { total / batches as f64 } else { 0.0 });
    }
    Ok(history)
}

/// Logits of the requested head for a batch of inputs.
pub fn mode_logits(params: &ModelParams, x: &Matrix, mode: PredictionMode) -> Result<Matrix> {
    let feats = params.features(x)?;
    match mode {
        PredictionMode::Linear => params.linear_logits_of(&feats),
        PredictionMode::Angular => Ok(angular_logits_lenient(&feats, params.classifier())?.values),
        PredictionMode::Lws => {
            let lin = params.linear_logits_of(&feats)?;
            params.lws_logits_of(&lin).ok_or(Error::MissingLwsScale)
        }
    }
}

pub fn mode_probs(params: &ModelParams, x: &Matrix, mode: PredictionMode) -> Result<Matrix> {
    softmax_rows(&mode_logits(params, x, mode)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub mode: PredictionMode,
    pub calibrated: bool,
    pub overall: f64,
    /// `None` for classes without test samples.
    pub per_class: Vec<Option<f64>>,
    pub head: Option<f64>,
    pub mid: Option<f64>,
    pub tail: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(
        label: impl Into<String>,
        mode: PredictionMode,
        calibrated: bool,
        labels: &[usize],
        predictions: &[usize],
        classes: usize,
        groups: &GroupSpec,
    ) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::shape("EvalReport", labels.len(), predictions.len()));
        }
        if labels.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            confusion[y][p] += 1;
        }
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        let group_acc = |r: std::ops::Range<usize>| -> Option<f64> {
            let (hit, n) = r.fold((0usize, 0usize), |(h, n), c| (h + confusion[c][c], n + confusion[c].iter().sum::<usize>()));
            (n > 0).then(|| hit as f64 / n as f64)
        };
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        Ok(EvalReport {
            label: label.into(),
            mode,
            calibrated,
            overall: correct as f64 / labels.len() as f64,
            per_class,
            head: group_acc(groups.head.clone()),
            mid: group_acc(groups.mid.clone()),
            tail: group_acc(groups.tail.clone()),
            confusion,
        })
    }
}

/// Predictions by argmax of the chosen logits, or of `γ ⊙ softmax` when a
/// calibration profile is given. Read-only with respect to the model.
pub fn predict(
    params: &ModelParams,
    x: &Matrix,
    mode: PredictionMode,
    profile: Option<&CalibrationProfile>,
) -> Result<Vec<usize>> {
    let logits = mode_logits(params, x, mode)?;
    match profile {
        Some(p) => Ok(abs_apply(&softmax_rows(&logits)?, p)?.predictions),
        None => logits.row_iter().map(argmax_tiebreak).collect(),
    }
}

pub fn evaluate(
    params: &ModelParams,
    test: &Dataset,
    mode: PredictionMode,
    profile: Option<&CalibrationProfile>,
    groups: &GroupSpec,
) -> Result<EvalReport> {
    evaluate_labeled(format!("{mode}"), params, test, mode, profile, groups)
}

pub fn evaluate_labeled(
    label: impl Into<String>,
    params: &ModelParams,
    test: &Dataset,
    mode: PredictionMode,
    profile: Option<&CalibrationProfile>,
    groups: &GroupSpec,
) -> Result<EvalReport> {
    let preds = predict(params, test.features(), mode, profile)?;
    EvalReport::from_predictions(
        label,
        mode,
        profile.is_some(),
        test.labels(),
        &preds,
        params.num_classes(),
        groups,
    )
}

/// Calibration profile from the model's angular softmax on `train`.
pub fn fit_calibration(params: &ModelParams, train: &Dataset, form: BiasForm, s: f64) -> Result<CalibrationProfile> {
    let probs = mode_probs(params, train.features(), PredictionMode::Angular)?;
    CalibrationProfile::fit(&probs, form, s)
}

/// Analysis outputs attached to every experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDiagnostics {
    pub weight_norm_stage1: ProfileSeries,
    pub weight_norm_final: ProfileSeries,
    /// Spearman correlation of stage-one classifier row norms with class index.
    pub weight_norm_spearman: Option<f64>,
    pub mean_linear_logit: ProfileSeries,
    pub mean_angular_logit: ProfileSeries,
    pub smoothness_linear: f64,
    pub smoothness_angular: f64,
    pub mean_prob_angular: ProfileSeries,
    pub mean_prob_calibrated: Option<ProfileSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub stage1_loss: Vec<f64>,
    pub stage2_loss: Vec<f64>,
    pub reports: Vec<EvalReport>,
    pub final_report: EvalReport,
    pub calibration: Option<CalibrationProfile>,
    pub diagnostics: ExperimentDiagnostics,
}

impl ExperimentResult {
    pub fn report(&self, label: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.label == label)
    }
}

/// Result plus the trained models.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub result: ExperimentResult,
    pub stage1_model: ModelParams,
    pub final_model: ModelParams,
}

/// Trains stage one, then stage two if configured, on the given data.
pub fn train_pipeline(cfg: &ExperimentConfig, train: &Dataset) -> Result<(ModelParams, ModelParams, Vec<f64>, Vec<f64>)> {
    let seeds = TrainSeeds::from_root(cfg.seed);
    let mut model = init_model(&cfg.model, train, seeds.init)?;
    let loss1 = stage_one(&mut model, train, &cfg.stage1, seeds)?;
    let stage1 = model.clone();
    let loss2 = stage_two(&mut model, train, &cfg.stage2, derive_seed(cfg.seed, "stage2", 0))?;
    Ok((stage1, model, loss1, loss2))
}

/// Full pipeline on the configured data.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (train, test) = cfg.data.build(cfg.seed)?;
    run_experiment_on(cfg, &train, &test)
}

/// Full pipeline: stage one, optional stage two, optional bias correction,
/// reports for every applicable head and the diagnostics.
///
/// Report labels: `stage1/linear`, `stage1/angular`, `stage2/{linear,
/// angular, lws}` when stage two ran, `abs/angular` with post-hoc correction.
pub fn run_experiment_on(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<ExperimentOutcome> {
    let m = train.num_classes();
    if test.num_classes() != m || test.dim() != train.dim() {
        return Err(Error::shape(
            "test set",
            format!("{m} classes, dim {}", train.dim()),
            format!("{} classes, dim {}", test.num_classes(), test.dim()),
        ));
    }
    let cfg = cfg.resolve(m)?;
    let groups = cfg.group_spec(m)?;
    let (stage1, final_model, loss1, loss2) = train_pipeline(&cfg, train)?;

    let mut reports = vec![
        evaluate_labeled("stage1/linear", &stage1, test, PredictionMode::Linear, None, &groups)?,
        evaluate_labeled("stage1/angular", &stage1, test, PredictionMode::Angular, None, &groups)?,
    ];
    if cfg.stage2.kind != Stage2Kind::None {
        reports.push(evaluate_labeled("stage2/linear", &final_model, test, PredictionMode::Linear, None, &groups)?);
        reports.push(evaluate_labeled("stage2/angular", &final_model, test, PredictionMode::Angular, None, &groups)?);
        if final_model.lws_scale().is_some() {
            reports.push(evaluate_labeled("stage2/lws", &final_model, test, PredictionMode::Lws, None, &groups)?);
        }
    }
    let mode = cfg.eval_mode();
    let calibration = match cfg.posthoc.kind {
        PosthocKind::Abs => Some(fit_calibration(
            &final_model,
            train,
            cfg.posthoc.form.expect("resolved"),
            cfg.posthoc.s.expect("resolved"),
        )?),
        PosthocKind::None => None,
    };
    if let Some(profile) = &calibration {
        reports.push(evaluate_labeled("abs/angular", &final_model, test, PredictionMode::Angular, Some(profile), &groups)?);
    }
    let final_mode = if calibration.is_some() { PredictionMode::Angular } else { mode };
    let final_report = evaluate_labeled("final", &final_model, test, final_mode, calibration.as_ref(), &groups)?;

    let weight_norm_stage1 = diagnostics::weight_norm_profile(stage1.classifier());
    let norms = stage1.classifier().row_norms();
    let index: Vec<f64> = (0..m).map(|c| c as f64).collect();
    let mean_linear_logit = diagnostics::mean_logit_profile(&stage1, train, PredictionMode::Linear)?;
    let mean_angular_logit = diagnostics::mean_logit_profile(&stage1, train, PredictionMode::Angular)?;
    let diagnostics = ExperimentDiagnostics {
        weight_norm_stage1,
        weight_norm_final: diagnostics::weight_norm_profile(final_model.classifier()),
        weight_norm_spearman: diagnostics::spearman(&norms, &index),
        smoothness_linear: diagnostics::smoothness(&mean_linear_logit.values),
        smoothness_angular: diagnostics::smoothness(&mean_angular_logit.values),
        mean_linear_logit,
        mean_angular_logit,
        mean_prob_angular: diagnostics::mean_prob_profile(&final_model, test, PredictionMode::Angular, None)?,
        mean_prob_calibrated: calibration
            .as_ref()
            .map(|p| diagnostics::mean_prob_profile(&final_model, test, PredictionMode::Angular, Some(p)))
            .transpose()?,
    };
    Ok(ExperimentOutcome {
        result: ExperimentResult {
            config: cfg,
            train_counts: train.class_counts().to_vec(),
            test_counts: test.class_counts().to_vec(),
            stage1_loss: loss1,
            stage2_loss: loss2,
            reports,
            final_report,
            calibration,
            diagnostics,
        },
        stage1_model: stage1,
        final_model,
    })
}

/// Short-run config used by tests and examples.
pub fn quick_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..Default::default()
    };
    cfg.data.n_max = 100;
    cfg.data.test_per_class = 30;
    cfg.data.imbalance = 20.0;
    cfg.stage1.epochs = 8;
    cfg.stage2.epochs = 3;
    cfg
}
