//! Trains a cross-entropy model and compares linear with angular prediction
//! on the same weights.

use angular_lt::framework::{evaluate, init_model, stage_one, quick_config, TrainSeeds};
use angular_lt::PredictionMode;

fn main() -> angular_lt::Result<()> {
    let cfg = quick_config(1);
    let (train, test) = cfg.data.build(cfg.seed)?;
    let groups = cfg.group_spec(train.num_classes())?;

    let seeds = TrainSeeds::from_root(cfg.seed);
    let mut model = init_model(&cfg.model, &train, seeds.init)?;
    let losses = stage_one(&mut model, &train, &cfg.stage1, seeds)?;
    println!("final stage-one loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));

    for mode in [PredictionMode::Linear, PredictionMode::Angular] {
        let r = evaluate(&model, &test, mode, None, &groups)?;
        println!(
            "{:>8}: overall {:.4}  head {:.4}  mid {:.4}  tail {:.4}",
            mode.to_string(),
            r.overall,
            r.head.unwrap_or(f64::NAN),
            r.mid.unwrap_or(f64::NAN),
            r.tail.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
