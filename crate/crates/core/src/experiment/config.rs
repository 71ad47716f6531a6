//! Experiment configuration files (JSON, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PartitionSpec, SceneConfig};
use crate::error::{Error, Result};
use crate::federation::{Algorithm, LrSchedule, RoundConfig};
use crate::model::{resolve_taps, NetConfig, TapSpec};
use crate::numeric::Precision;
use crate::objectives::LossWeights;

/// One value for every tap, or an explicit per-tap list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TapWeights {
    Uniform(f64),
    PerTap(Vec<f64>),
}

impl TapWeights {
    pub fn expand(&self, taps: usize, name: &str) -> Result<Vec<f64>> {
        match self {
            TapWeights::Uniform(v) => Ok(vec![*v; taps]),
            TapWeights::PerTap(v) if v.len() == taps => Ok(v.clone()),
            TapWeights::PerTap(v) => Err(Error::Config(format!(
                "training.{name} lists {} values for {taps} taps",
                v.len()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub scene: SceneConfig,
    pub train_samples: usize,
    pub test_samples: usize,
    pub partition: PartitionSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Channel width C of the first encoder block.
    pub width: usize,
    pub taps: TapSpec,
}

fn default_alpha() -> TapWeights {
    TapWeights::Uniform(0.4)
}

fn default_lambda() -> TapWeights {
    TapWeights::Uniform(0.1)
}

fn one_f() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default = "one_f")]
    pub participation: f64,
    pub algorithm: Algorithm,
    #[serde(default = "default_alpha")]
    pub alpha: TapWeights,
    #[serde(default = "default_lambda")]
    pub lambda: TapWeights,
}

fn one() -> usize {
    1
}

fn eval_batch() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    /// Held-out metrics every this many rounds (the last round always).
    #[serde(default = "one")]
    pub every: usize,
    /// H and ‖∇L‖² every this many rounds; 0 disables them.
    #[serde(default)]
    pub diagnostics_every: usize,
    #[serde(default = "eval_batch")]
    pub batch_size: usize,
    /// Number of test images dumped as PGM predictions at the end.
    #[serde(default)]
    pub panel: usize,
    /// Intermediate checkpoints every this many rounds; 0 disables them.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Record real elapsed time; off keeps logs byte-reproducible.
    #[serde(default)]
    pub log_wall_time: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            every: 1,
            diagnostics_every: 0,
            batch_size: eval_batch(),
            panel: 0,
            checkpoint_every: 0,
            log_wall_time: false,
        }
    }
}

fn default_precision() -> Precision {
    Precision::Single
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "one")]
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: self.data.scene.channels,
            width: self.model.width,
            classes: self.data.scene.classes,
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        let m = resolve_taps(&self.model.taps, &self.net_config())?.len();
        Ok(LossWeights {
            alpha: self.training.alpha.expand(m, "alpha")?,
            lambda: self.training.lambda.expand(m, "lambda")?,
        })
    }

    pub fn round_config(&self) -> Result<RoundConfig> {
        let t = &self.training;
        Ok(RoundConfig {
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            schedule: t.schedule,
            participation: t.participation,
            algorithm: t.algorithm,
            weights: self.loss_weights()?,
        })
    }

    /// Checks every section before anything is computed or written.
    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.data.partition.validate()?;
        if self.data.train_samples == 0 || self.data.test_samples == 0 {
            return Err(Error::Config(
                "data.train_samples and data.test_samples must be positive".into(),
            ));
        }
        let p = &self.data.partition;
        if self.data.train_samples < p.vehicles * p.min_samples.max(1) {
            return Err(Error::Config(format!(
                "data.train_samples = {} cannot give {} vehicles at least {} samples each",
                self.data.train_samples,
                p.vehicles,
                p.min_samples.max(1)
            )));
        }
        self.net_config().validate()?;
        let weights = self.loss_weights()?;
        weights.validate(weights.taps())?;
        self.round_config()?.validate()?;
        if self.training.rounds == 0 {
            return Err(Error::Config("training.rounds must be at least 1".into()));
        }
        if self.evaluation.every == 0 {
            return Err(Error::Config("evaluation.every must be at least 1".into()));
        }
        if self.evaluation.batch_size == 0 {
            return Err(Error::Config("evaluation.batch_size must be at least 1".into()));
        }
        if self.evaluation.panel > self.data.test_samples {
            return Err(Error::Config(format!(
                "evaluation.panel = {} exceeds data.test_samples = {}",
                self.evaluation.panel, self.data.test_samples
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}
