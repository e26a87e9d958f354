//! Run configuration shared by the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crd::TrainConfig;
use crate::error::{CrasError, Result};
use crate::feature_prep::PrepConfig;
use crate::scoring::ScoreConfig;
use crate::tensor_store::write_atomic;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const CHECKPOINT: &str = "checkpoint.crmd";
pub const CENTERS_DIR: &str = "centers";
pub const SCORES_DIR: &str = "scores";
pub const REPORT: &str = "report.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub prep: PrepConfig,
    pub train: TrainConfig,
    pub smooth_sigma: f64,
    /// Map size for test samples without masks.
    pub out_size: Option<(usize, usize)>,
    /// Forces single-worker execution everywhere.
    pub deterministic: bool,
    /// When set, overrides both the training and the noise seed.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            output_dir: PathBuf::from("runs/default"),
            prep: PrepConfig::default(),
            train: TrainConfig::default(),
            smooth_sigma: 4.0,
            out_size: None,
            deterministic: false,
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(CrasError::Config(format!("config file {} not found", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CrasError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CrasError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the seed override and the deterministic flag.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.train.noise.seed = seed;
        }
        if self.deterministic {
            self.train.workers = 1;
        }
        if !(self.smooth_sigma >= 0.0 && self.smooth_sigma.is_finite()) {
            return Err(CrasError::Config(format!(
                "smooth_sigma must be non-negative, got {}",
                self.smooth_sigma
            )));
        }
        if matches!(self.out_size, Some((0, _)) | Some((_, 0))) {
            return Err(CrasError::Config("out_size must be nonzero".into()));
        }
        self.prep.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        let path = self
            .manifest
            .as_deref()
            .ok_or_else(|| CrasError::Config("no dataset manifest given".into()))?;
        if !path.is_file() {
            return Err(CrasError::Config(format!("manifest {} not found", path.display())));
        }
        Ok(path)
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            feature_mode: self.train.feature_mode,
            smooth_sigma: self.smooth_sigma,
            out_size: self.out_size,
            workers: self.train.workers,
        }
    }

    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_atomic(
            &dir.as_ref().join(RESOLVED_CONFIG),
            serde_json::to_string_pretty(self)?.as_bytes(),
        )
    }
}
