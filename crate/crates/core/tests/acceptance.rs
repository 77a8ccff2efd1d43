//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;

use angular_lt::angular::{angles_lenient, angular_logits, angular_logits_train};
use angular_lt::calibrate::{abs_apply, bias_profile, BiasForm};
use angular_lt::cli::{self, prune_points, sweep_rows};
use angular_lt::config::{RunConfig, SweepParam};
use angular_lt::dataset::{longtail_counts, LtSpec};
use angular_lt::diagnostics::hardness_accuracy;
use angular_lt::framework::{
    fit_calibration, mode_probs, run_experiment, ExperimentConfig, ExperimentResult, Stage1Kind, Stage2Kind,
};
use angular_lt::losses::{aem_loss, alas_step, las_targets, loss_grad, LasConfig, LossKind, SmoothingForm, SmoothingState};
use angular_lt::model::{Activation, Layer, ModelParams, ModelSpec, Upstream};
use angular_lt::numeric::{argmax_tiebreak, softmax_rows, Matrix, RngStream};
use angular_lt::prune::{avh_score, el2n_score, score_with_members, train_ensemble, PruneMetric};
use angular_lt::PredictionMode;
use rayon::prelude::*;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn benchmark(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        ..Default::default()
    }
}

struct Runs {
    baseline: Vec<ExperimentResult>,
    atl_alas: Vec<ExperimentResult>,
    atl_all: Vec<ExperimentResult>,
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let go = |make: fn(u64) -> ExperimentConfig| -> Vec<ExperimentResult> {
            SEEDS
                .par_iter()
                .map(|&s| run_experiment(&make(s)).expect("benchmark run").result)
                .collect()
        };
        Runs {
            baseline: go(benchmark),
            atl_alas: go(|s| {
                let mut c = benchmark(s);
                c.stage2.kind = Stage2Kind::Alas;
                c
            }),
            atl_all: go(|s| {
                let mut c = benchmark(s);
                c.stage1.kind = Stage1Kind::Aem;
                c.stage2.kind = Stage2Kind::Alas;
                c
            }),
        }
    })
}

fn report<'a>(r: &'a ExperimentResult, label: &str) -> &'a angular_lt::EvalReport {
    r.report(label).unwrap_or_else(|| panic!("missing report {label}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

fn random_matrix(rng: &mut RngStream, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform() * 2.0 - 1.0).collect()).unwrap()
}

fn scale_invariance() -> Check {
    let mut rng = RngStream::new(2024, 1);
    let (mut max_diff, mut changed, mut equal_norm_mismatch) = (0.0f64, 0, 0);
    for _ in 0..100 {
        let phi = random_matrix(&mut rng, 8, 6);
        let w = random_matrix(&mut rng, 5, 6);
        let scales: Vec<f64> = (0..5).map(|_| 2f64.powf(6.0 * rng.uniform() - 3.0)).collect();
        let mut ws = w.clone();
        for c in 0..5 {
            ws.row_mut(c).iter_mut().for_each(|v| *v *= scales[c]);
        }
        let a = angular_logits(&phi, &w).unwrap().values;
        let b = angular_logits(&phi, &ws).unwrap().values;
        max_diff = max_diff.max(a.max_abs_diff(&b));
        let la = phi.matmul_t(&w).unwrap();
        let lb = phi.matmul_t(&ws).unwrap();
        if (0..8).any(|i| argmax_tiebreak(la.row(i)).unwrap() != argmax_tiebreak(lb.row(i)).unwrap()) {
            changed += 1;
        }
        // Equal row norms.
        let mut we = w.clone();
        let target = 0.5 + rng.uniform();
        for c in 0..5 {
            let n = we.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            we.row_mut(c).iter_mut().for_each(|v| *v *= target / n);
        }
        let lin = phi.matmul_t(&we).unwrap();
        let ang = angular_logits(&phi, &we).unwrap().values;
        for i in 0..8 {
            if argmax_tiebreak(lin.row(i)).unwrap() != argmax_tiebreak(ang.row(i)).unwrap() {
                equal_norm_mismatch += 1;
            }
        }
    }
    ensure(
        max_diff <= 1e-9 && changed >= 1 && equal_norm_mismatch == 0,
        format!("max angular diff {max_diff:.2e}, linear argmax changed in {changed}/100, equal-norm mismatches {equal_norm_mismatch}"),
    )
}

fn perturbed(p: &ModelParams, tensor: usize, index: usize, delta: f64) -> ModelParams {
    let mut layers: Vec<Layer> = p.layers().to_vec();
    let mut classifier = p.classifier().clone();
    let nl = layers.len();
    if tensor < 2 * nl {
        let l = &mut layers[tensor / 2];
        if tensor % 2 == 0 {
            l.weight.as_mut_slice()[index] += delta;
        } else {
            l.bias[index] += delta;
        }
    } else {
        classifier.as_mut_slice()[index] += delta;
    }
    ModelParams::from_parts(layers, classifier, None, None).unwrap()
}

fn angular_loss(p: &ModelParams, x: &Matrix, q: &Matrix, kind: LossKind) -> f64 {
    let f = p.features(x).unwrap();
    loss_grad(kind, &angular_logits_train(&f, p.classifier()).unwrap(), q).unwrap().0
}

fn gradient_checks() -> Check {
    let h = 1e-5;
    let mut worst = [0.0f64; 4];
    let names = ["ce", "las", "alas", "aem"];
    for net in 0..50u64 {
        let mut rng = RngStream::new(net, 77);
        let spec = ModelSpec {
            hidden: vec![5, 4],
            activation: Activation::Tanh,
            classifier_bias: false,
        };
        let params = ModelParams::init(&spec, 3, 3, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 6, 3);
        let labels: Vec<usize> = (0..6).map(|_| rng.below(3)).collect();
        let onehot = angular_lt::dataset::one_hot(&labels, 3);
        let las = las_targets(&[30, 10, 3], &LasConfig::default()).unwrap().select_rows(&labels);
        let mut state = SmoothingState::new(&[30, 10, 3], &LasConfig::default(), 0.75, SmoothingForm::Concave).unwrap();
        let f = params.features(&x).unwrap();
        let probs = softmax_rows(&angular_logits_train(&f, params.classifier()).unwrap()).unwrap();
        let alas = state.update(&probs, &labels).unwrap().to_matrix(3);
        let cases = [
            (&onehot, LossKind::CrossEntropy),
            (&las, LossKind::CrossEntropy),
            (&alas, LossKind::CrossEntropy),
            (&onehot, LossKind::Aem),
        ];
        for (k, (q, kind)) in cases.into_iter().enumerate() {
            let fwd = params.forward(&x).unwrap();
            let logits = angular_logits_train(&fwd.features, params.classifier()).unwrap();
            let (_, g) = loss_grad(kind, &logits, q).unwrap();
            let grads = params.backward(&fwd, Upstream::Angular(&g)).unwrap();
            for (t, analytic) in grads.tensors.iter().enumerate() {
                for (i, &a) in analytic.iter().enumerate() {
                    let up = angular_loss(&perturbed(&params, t, i, h), &x, q, kind);
                    let down = angular_loss(&perturbed(&params, t, i, -h), &x, q, kind);
                    let n = (up - down) / (2.0 * h);
                    let denom = a.abs() + n.abs();
                    if denom > 1e-8 {
                        worst[k] = worst[k].max((a - n).abs() / denom);
                    }
                }
            }
        }
    }
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.iter().all(|&w| w < 1e-4), format!("max relative error over 50 nets: {detail}"))
}

/// Nearest integer by exhaustive search, ties toward the larger value.
fn brute_force_counts(total: usize, classes: usize, beta: f64) -> Vec<usize> {
    (0..classes)
        .map(|c| {
            let x = total as f64 / classes as f64 * beta.powf(-(c as f64) / (classes as f64 - 1.0));
            let mut best = 1usize;
            for k in 1..=total {
                let (dk, db) = ((k as f64 - x).abs(), (best as f64 - x).abs());
                if dk < db || (dk == db && k > best) {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn formula_oracles() -> Check {
    let counts = longtail_counts(&LtSpec {
        total: 50000,
        classes: 10,
        imbalance: 100.0,
    })
    .unwrap();
    let mut errs = Vec::new();
    if counts != brute_force_counts(50000, 10, 100.0) || counts != [5000, 2997, 1797, 1077, 646, 387, 232, 139, 83, 50] {
        errs.push(format!("counts {counts:?}"));
    }
    let el2n = el2n_score(&[Matrix::filled(1, 10, 0.1)], &[3]).unwrap()[0];
    if (el2n - 0.9f64.sqrt()).abs() > 1e-12 {
        errs.push(format!("el2n {el2n}"));
    }
    let avh = avh_score(&[Matrix::filled(1, 10, 1.1)], &[7]).unwrap()[0];
    if (avh - 0.1).abs() > 1e-12 {
        errs.push(format!("avh {avh}"));
    }
    let mut q = vec![0.0; 10];
    q[0] = 1.0;
    let aem = aem_loss(&[0.1; 10], &q).unwrap();
    if (aem - 2.0 * 10f64.ln()).abs() > 1e-12 {
        errs.push(format!("aem {aem}"));
    }
    let r = alas_step(0.5, 0.4, 0.6);
    if (r - 0.4).abs() > 1e-12 {
        errs.push(format!("alas {r}"));
    }
    let f = bias_profile(&[0.0, 0.5, 1.0], BiasForm::Sine).unwrap()[1];
    if (f - (PI / 4.0).sin()).abs() > 1e-12 {
        errs.push(format!("sine midpoint {f}"));
    }
    ensure(
        errs.is_empty(),
        if errs.is_empty() {
            "counts, el2n, avh, aem, alas step, sine midpoint all exact".into()
        } else {
            errs.join("; ")
        },
    )
}

fn weight_norm_imbalance() -> Check {
    let rho: Vec<f64> = runs()
        .baseline
        .iter()
        .map(|r| r.diagnostics.weight_norm_spearman.unwrap_or(f64::NAN))
        .collect();
    let hits = rho.iter().filter(|&&v| v < 0.0).count();
    ensure(hits >= 4, format!("{hits}/5 seeds negative, spearman [{}]", fmt(&rho)))
}

fn angular_eval_tail() -> Check {
    let b = &runs().baseline;
    let tail_lin: Vec<f64> = b.iter().map(|r| report(r, "stage1/linear").tail.unwrap()).collect();
    let tail_ang: Vec<f64> = b.iter().map(|r| report(r, "stage1/angular").tail.unwrap()).collect();
    let all_lin: Vec<f64> = b.iter().map(|r| report(r, "stage1/linear").overall).collect();
    let all_ang: Vec<f64> = b.iter().map(|r| report(r, "stage1/angular").overall).collect();
    let hits = tail_lin.iter().zip(&tail_ang).filter(|(l, a)| a > l).count();
    let drop = mean(&all_lin) - mean(&all_ang);
    ensure(
        hits >= 4 && drop <= 0.01,
        format!(
            "tail improved in {hits}/5 (linear [{}] -> angular [{}]), overall mean {:.4} -> {:.4}",
            fmt(&tail_lin),
            fmt(&tail_ang),
            mean(&all_lin),
            mean(&all_ang)
        ),
    )
}

fn angular_smoothness() -> Check {
    let b = &runs().baseline;
    let lin: Vec<f64> = b.iter().map(|r| r.diagnostics.smoothness_linear).collect();
    let ang: Vec<f64> = b.iter().map(|r| r.diagnostics.smoothness_angular).collect();
    let hits = lin.iter().zip(&ang).filter(|(l, a)| a < l).count();
    ensure(hits >= 4, format!("{hits}/5 seeds smoother; linear [{}], angular [{}]", fmt(&lin), fmt(&ang)))
}

fn bias_correction() -> Check {
    let cfg = RunConfig {
        sweep: angular_lt::config::SweepConfig {
            parameter: SweepParam::S,
            grid: None,
        },
        ..Default::default()
    };
    let rows = sweep_rows(&cfg).map_err(|e| e.to_string())?;
    let base = rows[0].overall.mean;
    let best = rows[1..]
        .iter()
        .max_by(|a, b| a.overall.mean.total_cmp(&b.overall.mean))
        .unwrap();

    // γ bounds and the s = 0 identity on one trained model.
    let exp = benchmark(0);
    let (train, test) = exp.data.build(0).unwrap();
    let (_, model, _, _) = angular_lt::framework::train_pipeline(&exp.resolve(10).unwrap(), &train).unwrap();
    let probs = mode_probs(&model, test.features(), PredictionMode::Angular).unwrap();
    let mut gamma_ok = true;
    for s in cfg.sweep.effective_grid() {
        let p = fit_calibration(&model, &train, BiasForm::Sine, s).unwrap();
        gamma_ok &= p.gamma.iter().all(|&g| g >= 1.0 - s && g <= 1.0);
    }
    let p0 = fit_calibration(&model, &train, BiasForm::Sine, 0.0).unwrap();
    let cal = abs_apply(&probs, &p0).unwrap();
    let plain: Vec<usize> = probs.row_iter().map(|r| argmax_tiebreak(r).unwrap()).collect();
    let identical = cal.scores.as_slice().iter().zip(probs.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits())
        && cal.predictions == plain;
    let grid: Vec<String> = rows.iter().map(|r| format!("{:.2}:{:.4}", r.value, r.overall.mean)).collect();
    ensure(
        best.overall.mean >= base && gamma_ok && identical,
        format!(
            "best s={:.2} mean {:.4} vs s=0 {:.4}; gamma bounds {gamma_ok}; s=0 identity {identical}; grid [{}]",
            best.value,
            best.overall.mean,
            base,
            grid.join(" ")
        ),
    )
}

fn atl_ordering() -> Check {
    let r = runs();
    let base = mean(&r.baseline.iter().map(|x| report(x, "stage1/linear").overall).collect::<Vec<_>>());
    let alas = mean(&r.atl_alas.iter().map(|x| x.final_report.overall).collect::<Vec<_>>());
    let all = mean(&r.atl_all.iter().map(|x| x.final_report.overall).collect::<Vec<_>>());
    ensure(
        all >= base && alas >= base,
        format!("baseline {base:.4}, alas {alas:.4}, all {all:.4}"),
    )
}

fn avh_exactness() -> Check {
    let mut total_checked = 0;
    let mut violations = 0;
    for seed in SEEDS {
        let exp = benchmark(seed);
        let (train, test) = exp.data.build(seed).unwrap();
        let members = train_ensemble(&train, &exp.model, &exp.stage1, &Default::default(), seed).unwrap();
        let table = score_with_members(PruneMetric::Avh, &members, &train, 10).unwrap();
        // Recount from raw angles: the true class must be the row minimum for
        // every member.
        let all_angles: Vec<Matrix> = members
            .iter()
            .map(|m| angles_lenient(&m.features(train.features()).unwrap(), m.classifier()).unwrap().angles)
            .collect();
        for (i, &y) in train.labels().iter().enumerate() {
            let correct = all_angles.iter().all(|a| {
                let row = a.row(i);
                row.iter().enumerate().all(|(c, &t)| c == y || row[y] < t)
            });
            if correct {
                total_checked += 1;
                let share = mean(&all_angles.iter().map(|a| a.row(i)[y] / a.row(i).iter().sum::<f64>()).collect::<Vec<_>>());
                if share > 0.1 || (share - table.scores[i]).abs() > 1e-12 {
                    violations += 1;
                }
            }
        }
        let (model, _, _, _) = angular_lt::framework::train_pipeline(&exp.resolve(10).unwrap(), &train).unwrap();
        let report = angular_lt::framework::evaluate(&model, &test, PredictionMode::Angular, None, &exp.resolve(10).unwrap().group_spec(10).unwrap()).unwrap();
        violations += hardness_accuracy(&table, &report).unwrap().violations;
    }
    ensure(
        violations == 0 && total_checked > 0,
        format!("{total_checked} consensus-correct samples over 5 seeds, {violations} above 1/M"),
    )
}

fn pruning() -> Check {
    let mut cfg = RunConfig::default();
    cfg.prune.fractions = vec![0.0, 0.3];
    let (points, _) = prune_points(&cfg).map_err(|e| e.to_string())?;
    let at = |m: PruneMetric, f: f64| -> Vec<f64> {
        points.iter().filter(|p| p.metric == m && p.fraction == f).map(|p| p.overall).collect()
    };
    let avh = mean(&at(PruneMetric::Avh, 0.3));
    let random = mean(&at(PruneMetric::Random, 0.3));
    let base = &runs().baseline;
    let mut coincide = true;
    for p in points.iter().filter(|p| p.fraction == 0.0) {
        let r = &base[SEEDS.iter().position(|&s| s == p.seed).unwrap()].final_report;
        coincide &= p.overall.to_bits() == r.overall.to_bits() && p.tail == r.tail && p.head == r.head && p.mid == r.mid;
    }
    let el2n = mean(&at(PruneMetric::El2n, 0.3));
    let cr = mean(&at(PruneMetric::ClassRandom, 0.3));
    ensure(
        avh >= random && coincide,
        format!("30%: avh {avh:.4} vs random {random:.4} (el2n {el2n:.4}, class-random {cr:.4}); fraction 0 matches unpruned: {coincide}"),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.toml");
    std::fs::write(
        &config,
        "seeds = [0, 1]\n[data]\nn_max = 80\ntest_per_class = 20\n[stage1]\nepochs = 4\n[stage2]\nkind = \"alas\"\nepochs = 2\n\
         [posthoc]\nkind = \"abs\"\n[sweep]\nparameter = \"tau\"\ngrid = [0.5, 1.0]\n\
         [prune]\nfractions = [0.0, 0.3]\nensemble = { k = 2, epochs = 2 }\n",
    )
    .unwrap();
    let mut checked = Vec::new();
    for cmd in ["gen-data", "run", "sweep", "prune", "diagnose"] {
        let mut snapshots = Vec::new();
        for (rep, threads) in [(0, "1"), (1, "3")] {
            let out = tmp.path().join(format!("{cmd}-{rep}"));
            let code = cli::main_with_args([
                "angular-lt",
                cmd,
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--threads",
                threads,
            ]);
            if code != 0 {
                return Err(format!("{cmd} exited with {code}"));
            }
            snapshots.push(dir_bytes(&out));
        }
        if snapshots[0] != snapshots[1] || snapshots[0].is_empty() {
            return Err(format!("{cmd} outputs differ between reruns"));
        }
        checked.push(format!("{cmd} ({} files)", snapshots[0].len()));
    }
    Ok(format!("identical bytes on rerun (1 vs 3 threads): {}", checked.join(", ")))
}

fn main() {
    let criteria: Vec<(u32, &str, fn() -> Check)> = vec![
        (1, "scale invariance of angular logits", scale_invariance),
        (2, "finite-difference gradient checks", gradient_checks),
        (3, "formula oracles", formula_oracles),
        (4, "classifier weight norms fall with class index", weight_norm_imbalance),
        (5, "angular evaluation lifts tail accuracy", angular_eval_tail),
        (6, "angular mean logits are smoother", angular_smoothness),
        (7, "angular bias correction sweep", bias_correction),
        (8, "two-stage angular pipelines beat the baseline", atl_ordering),
        (9, "consensus-correct samples have hardness <= 1/M", avh_exactness),
        (10, "angular-hardness pruning vs random", pruning),
        (11, "command outputs are deterministic", cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let started = std::time::Instant::now();
    let results: Vec<(u32, &str, Check, f64)> = criteria
        .into_par_iter()
        .filter(|(id, name, _)| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()) || id.to_string() == *f))
        .map(|(id, name, f)| {
            let t = std::time::Instant::now();
            let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
            (id, name, outcome, t.elapsed().as_secs_f64())
        })
        .collect();
    let mut failed = 0;
    for (id, name, outcome, secs) in &results {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} [{tag}] {name} ({secs:.1}s): {detail}");
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
