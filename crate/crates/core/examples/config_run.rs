//! Runs the full pipeline from a TOML configuration, as the command-line
//! tool does, and prints the final report as JSON.

use angular_lt::config::parse_toml;
use angular_lt::run_experiment;

const CONFIG: &str = r#"
seed = 11

[data]
n_max = 120
test_per_class = 40

[stage1]
kind = "ce_mixup"
epochs = 10

[stage2]
kind = "alas"
epochs = 3

[posthoc]
kind = "abs"
"#;

fn main() -> angular_lt::Result<()> {
    let cfg = parse_toml(CONFIG)?;
    let out = run_experiment(&cfg.experiment(cfg.seed))?;
    println!("{}", serde_json::to_string_pretty(&out.result.final_report)?);
    Ok(())
}
