//! Experiment configuration files.
//!
//! A TOML document with `[model]`, `[adapter]`, `[transfer]`, `[train]`,
//! `[data]` and `[ablate]` tables. Unknown keys are rejected everywhere.
//! See `configs/` for annotated examples.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use adapter_core::model::{AdapterConfig, ModelConfig, Nonlinearity};
use adapter_core::train::{AdamConfig, Schedule, ScheduleKind, TrainConfig};
use adapter_core::transfer::{TransferMode, TransferPolicy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterSection>,
    #[serde(default)]
    pub transfer: TransferSection,
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateSection>,
}

/// Where adapters go. `top_layers` and `placement_layers` are mutually
/// exclusive; with neither, every block is adapted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub bottleneck: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement_layers: Option<BTreeSet<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    FullFinetune,
    Adapter,
    LayernormOnly,
    TopnFinetune,
    TopnAdapter,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    #[serde(default)]
    pub mode: ModeName,
    /// Required by the top-n modes, rejected otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default)]
    pub freeze_transformer_steps: usize,
    /// Full checkpoint to start from; relative paths resolve against the
    /// config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub schedule: ScheduleKind,
    pub peak_lr: f64,
    pub total_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Eval-row period in steps; 0 disables periodic eval rows.
    #[serde(default)]
    pub eval_every: usize,
}

fn default_batch() -> usize {
    8
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Tail fraction of the training file held out for eval rows.
    #[serde(default)]
    pub eval_fraction: f64,
}

/// Step budgets for the two ablation methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub adapter: Recipe,
    pub finetune: Recipe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub schedule: ScheduleKind,
    pub peak_lr: f64,
    pub total_steps: usize,
    #[serde(default)]
    pub freeze_transformer_steps: usize,
}

impl Recipe {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            kind: self.schedule,
            peak_lr: self.peak_lr,
            total_steps: self.total_steps,
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Config(format!("invalid config field `{field}`: {}", reason.into()))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves `transfer.base_checkpoint` against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = &cfg.transfer.base_checkpoint {
            if base.is_relative() {
                let dir = path.parent().unwrap_or(Path::new("."));
                cfg.transfer.base_checkpoint = Some(dir.join(base));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        if let Some(ac) = self.adapter_config()? {
            ac.validate(self.model.num_layers)?;
        }
        self.policy()?.validate(self.model.num_layers, self.adapter.is_some())?;
        self.train_config()?.validate()?;
        if !(0.0..1.0).contains(&self.data.eval_fraction) {
            return Err(invalid("data.eval_fraction", "must lie in [0, 1)"));
        }
        if let Some(ab) = &self.ablate {
            if self.adapter.is_none() {
                return Err(invalid("ablate", "needs an [adapter] table for the bottleneck size"));
            }
            ab.adapter.schedule().validate()?;
            ab.finetune.schedule().validate()?;
        }
        Ok(())
    }

    pub fn adapter_config(&self) -> Result<Option<AdapterConfig>, CliError> {
        let Some(a) = &self.adapter else {
            return Ok(None);
        };
        let layers = self.model.num_layers;
        let placement = match (a.top_layers, &a.placement_layers) {
            (Some(_), Some(_)) => {
                return Err(invalid("adapter.top_layers", "conflicts with adapter.placement_layers"));
            }
            (Some(n), None) => {
                if n == 0 || n > layers {
                    return Err(invalid("adapter.top_layers", format!("must lie in [1, {layers}]")));
                }
                (layers - n..layers).collect()
            }
            (None, Some(set)) => set.clone(),
            (None, None) => (0..layers).collect(),
        };
        Ok(Some(AdapterConfig {
            bottleneck: a.bottleneck,
            placement_layers: placement,
            nonlinearity: a.nonlinearity,
        }))
    }

    pub fn policy(&self) -> Result<TransferPolicy, CliError> {
        let t = &self.transfer;
        let n = || t.n.ok_or_else(|| invalid("transfer.n", "required by top-n modes"));
        let mode = match t.mode {
            ModeName::FullFinetune => TransferMode::FullFinetune,
            ModeName::Adapter => TransferMode::Adapter,
            ModeName::LayernormOnly => TransferMode::LayerNormOnly,
            ModeName::TopnFinetune => TransferMode::TopNFinetune(n()?),
            ModeName::TopnAdapter => TransferMode::TopNAdapter(n()?),
        };
        if t.n.is_some() && !matches!(t.mode, ModeName::TopnFinetune | ModeName::TopnAdapter) {
            return Err(invalid("transfer.n", "only valid for top-n modes"));
        }
        if t.freeze_transformer_steps > 0 && !mode.is_finetune() {
            return Err(invalid("transfer.freeze_transformer_steps", "only valid for fine-tune modes"));
        }
        Ok(TransferPolicy::new(mode).with_freeze_steps(t.freeze_transformer_steps))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        Ok(TrainConfig {
            policy: self.policy()?,
            schedule: Schedule {
                kind: t.schedule,
                peak_lr: t.peak_lr,
                total_steps: t.total_steps,
            },
            batch_size: t.batch_size,
            seed: t.seed,
            adam: t.adam,
            grad_clip: t.grad_clip,
        })
    }

    /// Hex SHA-256 of the canonical re-serialization, so formatting and
    /// comments in the source file do not matter.
    pub fn digest(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
