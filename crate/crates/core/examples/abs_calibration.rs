//! Post-hoc angular bias correction: fit the profile on training outputs
//! once, then sweep the strength on the test set.

use angular_lt::calibrate::BiasForm;
use angular_lt::framework::{evaluate, fit_calibration, quick_config, train_pipeline};
use angular_lt::PredictionMode;

fn main() -> angular_lt::Result<()> {
    let cfg = quick_config(4);
    let (train, test) = cfg.data.build(cfg.seed)?;
    let groups = cfg.group_spec(train.num_classes())?;
    let (_, model, _, _) = train_pipeline(&cfg, &train)?;

    let base = fit_calibration(&model, &train, BiasForm::Sine, 0.0)?;
    for s in [0.0, 0.1, 0.2, 0.3] {
        let profile = base.with_strength(s)?;
        let r = evaluate(&model, &test, PredictionMode::Angular, Some(&profile), &groups)?;
        println!("s={s:.2}: overall {:.4}  tail {:.4}", r.overall, r.tail.unwrap_or(f64::NAN));
    }
    print!("{}", base.with_strength(0.25)?.to_sidecar());
    Ok(())
}
