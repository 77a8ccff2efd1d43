//! Scores training samples with an ensemble, then compares retrained
//! accuracy after pruning by each metric.

use angular_lt::framework::quick_config;
use angular_lt::prune::{pruning_curve, EnsembleConfig, PruneConfig};

fn main() -> angular_lt::Result<()> {
    let cfg = quick_config(5);
    let prune = PruneConfig {
        fractions: vec![0.0, 0.2],
        ensemble: EnsembleConfig { k: 3, epochs: 4 },
        ..Default::default()
    };
    let (points, tables) = pruning_curve(&cfg, &prune)?;
    for p in &points {
        println!("{:>12} f={:.1}: kept {:>4}  overall {:.4}", p.metric.to_string(), p.fraction, p.kept, p.overall);
    }
    for t in &tables {
        let hardest = t.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!("{} scores: max {hardest:.4}", t.metric);
    }
    Ok(())
}
