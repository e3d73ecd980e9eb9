//! Run configuration: one JSON document holding the experiment settings,
//! the dataset, and the split, plus optional pretrain and sweep sections.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use selflearn::data::{DatasetSpec, SplitSpec};
use selflearn::losses::LossConfig;
use selflearn::selftrain::{ExperimentConfig, Initialization};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    /// Fully labeled source task for `pretrain`.
    #[serde(default)]
    pub source_dataset: Option<DatasetSpec>,
    /// Also train on every available label and report that accuracy as the
    /// empirical upper bound.
    #[serde(default)]
    pub all_labeled_reference: bool,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSpec {
    pub conditions: Vec<SweepCondition>,
}

/// One sweep condition: a name plus optional overrides of the base config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepCondition {
    pub name: String,
    #[serde(default)]
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub init: Option<Initialization>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config file {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment
            .validate()
            .context("invalid experiment settings")?;
        self.dataset.validate().context("invalid dataset")?;
        if let Some(source) = &self.source_dataset {
            source.validate().context("invalid source_dataset")?;
        }
        if let Some(sweep) = &self.sweep {
            if sweep.conditions.is_empty() {
                bail!("sweep.conditions must not be empty");
            }
            for condition in &sweep.conditions {
                if let Some(loss) = &condition.loss {
                    loss.validate()
                        .with_context(|| format!("condition `{}`", condition.name))?;
                }
            }
        }
        Ok(())
    }

    /// Apply a sweep condition's overrides, returning the effective config.
    pub fn with_condition(&self, condition: &SweepCondition) -> RunConfig {
        let mut out = self.clone();
        if let Some(loss) = condition.loss {
            out.experiment.loss = loss;
        }
        if let Some(init) = &condition.init {
            out.experiment.init = init.clone();
        }
        out
    }
}
