//! Trainable-set policies and exact parameter accounting.

use std::fmt;

use crate::checkpoint;
use crate::model::{AdapterConfig, Component, Model, ModelConfig, ParamSpec, layout};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferMode {
    /// Everything except the frontend; the body waits out the freeze window.
    FullFinetune,
    /// Adapters, every layer norm and the head.
    Adapter,
    /// Every layer norm and the head.
    LayerNormOnly,
    /// The top `n` blocks and the head; lower blocks (layer norms included)
    /// stay frozen.
    TopNFinetune(usize),
    /// Adapters of the top `n` blocks, every layer norm and the head.
    TopNAdapter(usize),
}

impl TransferMode {
    pub fn is_finetune(self) -> bool {
        matches!(self, TransferMode::FullFinetune | TransferMode::TopNFinetune(_))
    }

    pub fn needs_adapters(self) -> bool {
        matches!(self, TransferMode::Adapter | TransferMode::TopNAdapter(_))
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransferMode::FullFinetune => write!(f, "full_finetune"),
            TransferMode::Adapter => write!(f, "adapter"),
            TransferMode::LayerNormOnly => write!(f, "layernorm_only"),
            TransferMode::TopNFinetune(n) => write!(f, "topn_finetune({n})"),
            TransferMode::TopNAdapter(n) => write!(f, "topn_adapter({n})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransferPolicy {
    pub mode: TransferMode,
    /// Updates during which the transformer body stays frozen. Only
    /// consulted by fine-tune modes.
    pub freeze_transformer_steps: usize,
}

impl TransferPolicy {
    pub fn new(mode: TransferMode) -> Self {
        TransferPolicy {
            mode,
            freeze_transformer_steps: 0,
        }
    }

    pub fn with_freeze_steps(mut self, steps: usize) -> Self {
        self.freeze_transformer_steps = steps;
        self
    }

    pub fn validate(&self, num_layers: usize, has_adapters: bool) -> Result<()> {
        if let TransferMode::TopNFinetune(n) | TransferMode::TopNAdapter(n) = self.mode {
            if n == 0 || n > num_layers {
                return Err(Error::Policy(format!("{}: n must lie in [1, {num_layers}]", self.mode)));
            }
        }
        if self.mode.needs_adapters() && !has_adapters {
            return Err(Error::Policy(format!("{} requires a model with adapters", self.mode)));
        }
        Ok(())
    }

    /// Whether the parameter described by `spec` trains at `step`.
    pub fn is_trainable(&self, spec: &ParamSpec, num_layers: usize, step: usize) -> bool {
        let c = spec.component;
        if c == Component::Head {
            return true;
        }
        let unfrozen = step >= self.freeze_transformer_steps;
        let in_top = |n: usize| spec.layer.is_some_and(|l| l + n >= num_layers);
        match self.mode {
            TransferMode::FullFinetune => c != Component::Frontend && unfrozen,
            TransferMode::Adapter => c.is_adapter() || c.is_layer_norm(),
            TransferMode::LayerNormOnly => c.is_layer_norm(),
            TransferMode::TopNFinetune(n) => in_top(n) && unfrozen,
            TransferMode::TopNAdapter(n) => (c.is_adapter() && in_top(n)) || c.is_layer_norm(),
        }
    }

    /// Post-freeze-window trainable subset of `specs`.
    pub fn steady_state<'a>(&self, specs: &'a [ParamSpec], num_layers: usize) -> Vec<&'a ParamSpec> {
        specs
            .iter()
            .filter(|s| self.is_trainable(s, num_layers, usize::MAX))
            .collect()
    }
}

impl fmt::Display for TransferPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.mode.is_finetune() && self.freeze_transformer_steps > 0 {
            write!(f, "{} freeze={}", self.mode, self.freeze_transformer_steps)
        } else {
            write!(f, "{}", self.mode)
        }
    }
}

/// Sets every parameter's trainable flag for optimizer step `step`.
pub fn apply_policy(model: &mut Model, policy: &TransferPolicy, step: usize) -> Result<()> {
    let layers = model.config().num_layers;
    policy.validate(layers, model.has_adapters())?;
    for p in model.params_mut() {
        let t = policy.is_trainable(p.spec(), layers, step);
        p.set_trainable(t);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BreakdownRow {
    pub prefix: String,
    pub count: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
    pub breakdown: Vec<BreakdownRow>,
}

impl ParamReport {
    /// `prefix,count,trainable` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("prefix,count,trainable\n");
        for r in &self.breakdown {
            out.push_str(&format!("{},{},{}\n", r.prefix, r.count, r.trainable));
        }
        out
    }
}

fn report(specs: &[ParamSpec], policy: &TransferPolicy, num_layers: usize) -> ParamReport {
    let mut breakdown: Vec<BreakdownRow> = Vec::new();
    for s in specs {
        let trainable = policy.is_trainable(s, num_layers, usize::MAX);
        match breakdown.last_mut() {
            Some(r) if r.prefix == s.module_prefix() && r.trainable == trainable => r.count += s.numel(),
            _ => breakdown.push(BreakdownRow {
                prefix: s.module_prefix().to_string(),
                count: s.numel(),
                trainable,
            }),
        }
    }
    let total: usize = breakdown.iter().map(|r| r.count).sum();
    let trainable: usize = breakdown.iter().filter(|r| r.trainable).map(|r| r.count).sum();
    ParamReport {
        total,
        trainable,
        fraction: trainable as f64 / total as f64,
        breakdown,
    }
}

/// Exact counts for `model` under `policy`, using the post-freeze trainable
/// set for fine-tune modes.
pub fn count_params(model: &Model, policy: &TransferPolicy) -> Result<ParamReport> {
    let layers = model.config().num_layers;
    policy.validate(layers, model.has_adapters())?;
    Ok(report(&model.specs(), policy, layers))
}

/// Same as [`count_params`] from configs alone, without allocating weights.
pub fn count_params_for(mc: &ModelConfig, ac: Option<&AdapterConfig>, policy: &TransferPolicy) -> Result<ParamReport> {
    mc.validate()?;
    if let Some(ac) = ac {
        ac.validate(mc.num_layers)?;
    }
    let has_adapters = ac.is_some_and(|a| !a.placement_layers.is_empty());
    policy.validate(mc.num_layers, has_adapters)?;
    Ok(report(&layout(mc, ac), policy, mc.num_layers))
}

/// Bytes of the delta checkpoint holding `policy`'s trainable set.
pub fn delta_checkpoint_size(model: &Model, policy: &TransferPolicy) -> Result<usize> {
    let layers = model.config().num_layers;
    policy.validate(layers, model.has_adapters())?;
    let specs = model.specs();
    Ok(checkpoint::encoded_len(policy.steady_state(&specs, layers)))
}

/// Config-only variant of [`delta_checkpoint_size`].
pub fn delta_checkpoint_size_for(mc: &ModelConfig, ac: Option<&AdapterConfig>, policy: &TransferPolicy) -> Result<usize> {
    count_params_for(mc, ac, policy)?;
    let specs = layout(mc, ac);
    Ok(checkpoint::encoded_len(policy.steady_state(&specs, mc.num_layers)))
}

pub fn full_checkpoint_size_for(mc: &ModelConfig, ac: Option<&AdapterConfig>) -> usize {
    checkpoint::encoded_len(&layout(mc, ac))
}

/// Per-task storage when every task keeps its own trainable set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StorageProjection {
    pub tasks: usize,
    pub per_task_bytes: usize,
    /// `tasks × per_task_bytes`.
    pub cumulative_bytes: usize,
    /// One full checkpoint of the model without adapters, for scale.
    pub base_model_bytes: usize,
}

pub fn storage_projection(
    mc: &ModelConfig,
    ac: Option<&AdapterConfig>,
    policy: &TransferPolicy,
    tasks: usize,
) -> Result<StorageProjection> {
    let per_task = delta_checkpoint_size_for(mc, ac, policy)?;
    Ok(StorageProjection {
        tasks,
        per_task_bytes: per_task,
        cumulative_bytes: per_task * tasks,
        base_model_bytes: full_checkpoint_size_for(mc, None),
    })
}
