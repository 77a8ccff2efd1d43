//! Run configuration for the command-line tool.
//!
//! TOML with one table per section, or the same structure as JSON (chosen by
//! a `.json` extension). Every field is optional; unknown keys are rejected
//! with their full key path.
//!
//! ```toml
//! seed = 0
//! seeds = [0, 1, 2, 3, 4]
//!
//! [data]
//! dim = 20
//! classes = 10
//! imbalance = 100.0
//! n_max = 500
//!
//! [stage1]
//! kind = "ce"          # ce | ce_mixup | aem
//! epochs = 100
//!
//! [stage2]
//! kind = "alas"        # none | las_lws | alas
//! tau = 0.75
//!
//! [posthoc]
//! kind = "abs"         # none | abs
//! s = 0.25
//!
//! [eval]
//! mode = "angular"     # linear | angular | lws
//!
//! [sweep]
//! parameter = "s"      # s | tau
//! grid = [0.0, 0.04, 0.08]
//!
//! [prune]
//! metrics = ["random", "avh"]
//! fractions = [0.0, 0.3]
//! direction = "drop_lowest"
//! ensemble = { k = 5, epochs = 10 }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framework::{
    DataConfig, EvalConfig, ExperimentConfig, PosthocConfig, Stage1Config, Stage2Config,
};
use crate::model::ModelSpec;
use crate::prune::PruneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Tau,
    S,
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::Tau => "tau",
            SweepParam::S => "s",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub parameter: SweepParam,
    /// Defaults to `{0, 0.04, …, 0.32}` for `s` and `{0, 0.25, …, 1.5}` for `tau`.
    pub grid: Option<Vec<f64>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            parameter: SweepParam::S,
            grid: None,
        }
    }
}

impl SweepConfig {
    pub fn effective_grid(&self) -> Vec<f64> {
        match (&self.grid, self.parameter) {
            (Some(g), _) => g.clone(),
            (None, SweepParam::S) => (0..=8).map(|i| i as f64 * 0.04).collect(),
            (None, SweepParam::Tau) => (0..=6).map(|i| i as f64 * 0.25).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed of `run`, `gen-data` and `diagnose`.
    pub seed: u64,
    /// Seeds of `sweep` and `prune`.
    pub seeds: Vec<u64>,
    /// Not echoed into result bundles, so bundles are independent of where
    /// they are written.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub posthoc: PosthocConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub prune: PruneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: (0..5).collect(),
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelSpec::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            posthoc: PosthocConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            prune: PruneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn experiment(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            data: self.data.clone(),
            model: self.model.clone(),
            stage1: self.stage1.clone(),
            stage2: self.stage2.clone(),
            posthoc: self.posthoc.clone(),
            eval: self.eval.clone(),
        }
    }

    /// Checks that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let classes = self.data.classes.max(2);
        self.experiment(self.seed).resolve(classes)?;
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "must not be empty"));
        }
        for (i, &f) in self.prune.fractions.iter().enumerate() {
            if !(0.0..1.0).contains(&f) {
                return Err(config_err(&format!("prune.fractions[{i}]"), &format!("{f} outside [0, 1)")));
            }
        }
        if self.prune.ensemble.k == 0 {
            return Err(config_err("prune.ensemble.k", "must be > 0"));
        }
        let grid = self.sweep.effective_grid();
        if grid.is_empty() {
            return Err(config_err("sweep.grid", "must not be empty"));
        }
        for (i, &v) in grid.iter().enumerate() {
            let ok = match self.sweep.parameter {
                SweepParam::S => (0.0..=1.0).contains(&v),
                SweepParam::Tau => v >= 0.0,
            };
            if !ok {
                return Err(config_err(&format!("sweep.grid[{i}]"), &format!("{v} out of range")));
            }
        }
        Ok(())
    }
}

fn config_err(path: &str, message: &str) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.to_string(),
    }
}

fn key_path(path: &serde_path_to_error::Path) -> String {
    let p = path.to_string();
    if p == "." {
        "<root>".to_string()
    } else {
        p
    }
}

pub fn parse_toml(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| config_err("<root>", e.message()))?;
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: key_path(e.path()),
        message: e.inner().message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_json(text: &str) -> Result<RunConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Config {
        path: key_path(e.path()),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => parse_json(&text),
        _ => parse_toml(&text),
    }
}
