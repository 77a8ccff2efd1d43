//! Label-aware smoothing with learnable weight scaling, evaluated through
//! the scaled classifier head.

use angular_lt::framework::{quick_config, run_experiment, Stage2Kind};
use angular_lt::losses::{las_factors, LasConfig};

fn main() -> angular_lt::Result<()> {
    let mut cfg = quick_config(3);
    cfg.stage2.kind = Stage2Kind::LasLws;

    let out = run_experiment(&cfg)?;
    let factors = las_factors(&out.result.train_counts, &LasConfig::default())?;
    println!("train counts: {:?}", out.result.train_counts);
    println!("smoothing:    {:?}", factors.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>());
    for r in &out.result.reports {
        println!("{:>15}: overall {:.4}", r.label, r.overall);
    }
    println!("lws scale: {:?}", out.final_model.lws_scale());
    Ok(())
}
