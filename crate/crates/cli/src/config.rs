use std::fs;
use std::path::{Path, PathBuf};

use dscl_core::data::DatasetSpec;
use dscl_core::metrics::SimilaritySource;
use dscl_core::nets::ModelConfig;
use dscl_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Image-folder dataset; `None` generates the synthetic set in memory.
    pub data_dir: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: None,
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of stratified folds.
    pub folds: usize,
    /// Fold used by single-run `train` and `eval`.
    pub fold: usize,
    pub fold_seed: u64,
    pub similarity_source: SimilaritySource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            fold: 0,
            fold_seed: 0,
            similarity_source: SimilaritySource::Logits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub reps: usize,
    /// Images per timed forward pass.
    pub batch: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            reps: 11,
            batch: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Reads `path` (or defaults) and applies `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        // round-trip through the typed config so every key exists before overrides
        let base: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        value = serde_json::to_value(&base).expect("config serializes");
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.folds < 2 || self.eval.fold >= self.eval.folds {
            return Err(CliError::Config(format!(
                "fold {} outside 0..{}",
                self.eval.fold, self.eval.folds
            )));
        }
        if self.bench.reps == 0 || self.bench.batch == 0 {
            return Err(CliError::Config("bench reps and batch must be positive".into()));
        }
        Ok(())
    }
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
    }
    // bare words such as `sa` or paths are taken as strings
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
