//! Generates a long-tailed Gaussian-mixture training set and a balanced test
//! set, prints the per-class counts and writes both as CSV.

use angular_lt::dataset::{longtail_counts, save_csv, synth_gaussian_balanced, synth_gaussian_lt, LtSpec, SynthSpec};

fn main() -> angular_lt::Result<()> {
    let lt = LtSpec {
        total: 5000,
        classes: 10,
        imbalance: 100.0,
    };
    println!("expected counts: {:?}", longtail_counts(&lt)?);

    let spec = SynthSpec {
        dim: 20,
        radius: 2.5,
        noise: 1.0,
        lt,
        seed: 7,
    };
    let train = synth_gaussian_lt(&spec)?;
    let test = synth_gaussian_balanced(&spec, 200, "test-samples")?;
    println!("train: {} samples, counts {:?}", train.len(), train.class_counts());
    println!("test:  {} samples, counts {:?}", test.len(), test.class_counts());

    let dir = std::env::temp_dir().join("angular-lt-data");
    std::fs::create_dir_all(&dir)?;
    save_csv(&train, &dir.join("train.csv"))?;
    save_csv(&test, &dir.join("test.csv"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
