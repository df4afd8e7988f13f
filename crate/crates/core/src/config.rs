//! Run configuration as read from a JSON file. Command-line flags are
//! layered on top by the caller: flag > file > built-in default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::ScoreOptions;
use crate::error::{PgmaError, Result};
use crate::scoring::ThresholdMode;
use crate::train::{TrainConfig, DEFAULT_LR_GRID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub ma_window: usize,
    /// `max-validation`, `best-f1` or `fixed:<value>`.
    pub threshold: String,
    pub time_offset: Option<usize>,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            ma_window: 3,
            threshold: ThresholdMode::MaxValidation.to_string(),
            time_offset: None,
        }
    }
}

impl ScoreSection {
    pub fn options(&self) -> Result<ScoreOptions> {
        if self.ma_window == 0 {
            return Err(PgmaError::Config("moving-average window must be positive".into()));
        }
        Ok(ScoreOptions {
            ma_window: self.ma_window,
            threshold: self.threshold.parse()?,
            time_offset: self.time_offset,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub score: ScoreSection,
    /// Learning rates for grid search.
    pub lr_grid: Vec<f64>,
    /// Seeds for ablation and sweep runs.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            score: ScoreSection::default(),
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| PgmaError::Config(format!("config file: {e}")))
    }

    /// Built-in defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| PgmaError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.score.options()?;
        if self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(PgmaError::Config("grid learning rates must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(PgmaError::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
