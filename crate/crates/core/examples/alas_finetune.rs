//! Stage-two fine-tuning of the classifier with adaptive angular label
//! smoothing, compared against the stage-one model.

use angular_lt::framework::{quick_config, run_experiment, Stage2Kind};

fn main() -> angular_lt::Result<()> {
    let mut cfg = quick_config(2);
    cfg.stage2.kind = Stage2Kind::Alas;
    cfg.stage2.tau = 0.75;

    let out = run_experiment(&cfg)?;
    for label in ["stage1/angular", "stage2/angular"] {
        let r = out.result.report(label).expect("report");
        println!("{label:>15}: overall {:.4}  tail {:.4}", r.overall, r.tail.unwrap_or(f64::NAN));
    }
    println!("stage-two loss per epoch: {:?}", out.result.stage2_loss);
    Ok(())
}
