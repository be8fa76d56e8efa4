//! Run configuration: one JSON object with a section per module.
//!
//! ```text
//! {
//!   "model": {"name": "tiny-fixture", "seed": 0},
//!   "masker": {"base_channels": 16, "depth": 3, "seed": 0, "output_bias": 0.0},
//!   "objectives": {"lambda_act": 1.0, ...},
//!   "perturbation": {"kind": "uniform_noise", "seed": 0},
//!   "trainer": {"steps": 500, "learning_rate": 0.001, ...},
//!   "evaluation": {"n_trials": 16},
//!   "report": {"loss_trace": true},
//!   "output_dir": null
//! }
//! ```
//!
//! Missing sections and fields take their defaults. Saving a loaded config
//! reproduces the file byte for byte when it was itself written by [`RunConfig::save`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierSpec;
use crate::error::{Error, Result};
use crate::masker::MaskerConfig;
use crate::objectives::LossWeights;
use crate::perturbation::BackgroundSampler;
use crate::trainer::{EarlyStopping, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    pub seed: u64,
    pub robustness_draws_per_step: usize,
    pub early_stopping: Option<EarlyStopping>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            learning_rate: t.learning_rate,
            threshold: t.threshold,
            seed: t.seed,
            robustness_draws_per_step: t.robustness_draws_per_step,
            early_stopping: t.early_stopping,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub n_trials: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { n_trials: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub loss_trace: bool,
    pub overlay: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { loss_trace: true, overlay: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ClassifierSpec,
    pub masker: MaskerConfig,
    pub objectives: LossWeights,
    pub perturbation: BackgroundSampler,
    pub trainer: TrainerSection,
    pub evaluation: EvaluationSection,
    pub report: ReportSection,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults for `model`, including its step budget.
    pub fn for_model(model: &str) -> Self {
        let mut cfg = Self::default();
        cfg.model.name = model.to_string();
        cfg.trainer.steps = TrainConfig::for_model(model).steps;
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.trainer.steps,
            learning_rate: self.trainer.learning_rate,
            weights: self.objectives.clone(),
            threshold: self.trainer.threshold,
            sampler: self.perturbation.clone(),
            seed: self.trainer.seed,
            robustness_draws_per_step: self.trainer.robustness_draws_per_step,
            masker: self.masker.clone(),
            early_stopping: self.trainer.early_stopping.clone(),
            eval_trials: self.evaluation.n_trials,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| Error::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
