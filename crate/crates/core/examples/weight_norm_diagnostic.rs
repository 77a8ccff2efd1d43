//! Per-class diagnostics: classifier weight norms, mean logits and mean
//! probabilities, plus the hardness/accuracy correlation.

use angular_lt::diagnostics::hardness_accuracy;
use angular_lt::framework::{quick_config, run_experiment};
use angular_lt::prune::{ensemble_protocol, EnsembleConfig, PruneMetric};

fn show(name: &str, values: &[f64]) {
    let v: Vec<String> = values.iter().map(|x| format!("{x:.2}")).collect();
    println!("{name:>22}: [{}]", v.join(", "));
}

fn main() -> angular_lt::Result<()> {
    let cfg = quick_config(6);
    let out = run_experiment(&cfg)?;
    let d = &out.result.diagnostics;
    show("weight norm", &d.weight_norm_stage1.values);
    show("mean linear logit", &d.mean_linear_logit.values);
    show("mean angular logit", &d.mean_angular_logit.values);
    show("mean angular prob", &d.mean_prob_angular.values);
    println!("norm/class spearman: {:?}", d.weight_norm_spearman);
    println!("smoothness linear {:.3} angular {:.3}", d.smoothness_linear, d.smoothness_angular);

    let (train, _) = cfg.data.build(cfg.seed)?;
    let table = ensemble_protocol(
        PruneMetric::Avh,
        &train,
        &cfg.model,
        &cfg.stage1,
        &EnsembleConfig { k: 3, epochs: 4 },
        cfg.seed,
    )?;
    let h = hardness_accuracy(&table, &out.result.final_report)?;
    println!("hardness vs accuracy: pearson {:?} spearman {:?}, violations {}", h.pearson, h.spearman, h.violations);
    Ok(())
}
