use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// How raw input frames become `d_model`-wide encoder inputs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Frontend {
    /// Frames are used as-is; requires `d_in == d_model`.
    #[default]
    Identity,
    /// 1-D convolutions over time (GELU after each), then a linear
    /// projection to `d_model`. Output length per layer is
    /// `⌊(T − kernel) / stride⌋ + 1`.
    ConvStack {
        channels: Vec<usize>,
        kernels: Vec<usize>,
        strides: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    #[default]
    Sinusoidal,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    /// Label count, blank excluded. The head has `vocab_size + 1` outputs.
    pub vocab_size: usize,
    /// Width of an input frame.
    pub d_in: usize,
    #[serde(default)]
    pub frontend: Frontend,
    pub max_seq_len: usize,
    #[serde(default)]
    pub positional: Positional,
}

impl ModelConfig {
    /// Twelve 768-wide blocks over a seven-layer 512-channel conv encoder
    /// reading a raw waveform, with a 31-letter output alphabet.
    pub fn base_like() -> Self {
        ModelConfig {
            num_layers: 12,
            d_model: 768,
            num_heads: 12,
            d_ffn: 3072,
            vocab_size: 31,
            d_in: 1,
            frontend: Frontend::ConvStack {
                channels: vec![512; 7],
                kernels: vec![10, 3, 3, 3, 3, 2, 2],
                strides: vec![5, 2, 2, 2, 2, 2, 2],
            },
            max_seq_len: 16_000 * 30,
            positional: Positional::Sinusoidal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("d_in", self.d_in),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!("d_model {} is not divisible by {}", self.d_model, self.num_heads),
            ));
        }
        match &self.frontend {
            Frontend::Identity if self.d_in != self.d_model => Err(Error::config(
                "d_in",
                format!("identity frontend needs d_in == d_model ({} != {})", self.d_in, self.d_model),
            )),
            Frontend::Identity => Ok(()),
            Frontend::ConvStack {
                channels,
                kernels,
                strides,
            } => {
                if channels.is_empty() {
                    return Err(Error::config("frontend.channels", "needs at least one layer"));
                }
                if kernels.len() != channels.len() || strides.len() != channels.len() {
                    return Err(Error::config(
                        "frontend.kernels",
                        "channels, kernels and strides must have equal length",
                    ));
                }
                for (field, list) in [
                    ("frontend.channels", channels),
                    ("frontend.kernels", kernels),
                    ("frontend.strides", strides),
                ] {
                    if list.contains(&0) {
                        return Err(Error::config(field, "entries must be >= 1"));
                    }
                }
                Ok(())
            }
        }
    }

    /// Sequence length after the frontend, or `None` when it would be empty.
    pub fn frontend_len(&self, frames: usize) -> Option<usize> {
        match &self.frontend {
            Frontend::Identity => (frames >= 1).then_some(frames),
            Frontend::ConvStack { kernels, strides, .. } => {
                kernels.iter().zip(strides).try_fold(frames, |t, (&k, &s)| {
                    (t >= k).then(|| (t - k) / s + 1)
                })
            }
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// SHA-256 over the canonical JSON encoding; identifies an architecture
    /// in checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Gelu,
    Relu,
}

/// The two fixed adapter positions inside every adapted block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AdapterSlot {
    AfterAttention,
    AfterFfn,
}

impl AdapterSlot {
    pub const BOTH: [AdapterSlot; 2] = [AdapterSlot::AfterAttention, AdapterSlot::AfterFfn];

    pub fn index(self) -> usize {
        match self {
            AdapterSlot::AfterAttention => 0,
            AdapterSlot::AfterFfn => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    pub placement_layers: BTreeSet<usize>,
    pub nonlinearity: Nonlinearity,
}

impl AdapterConfig {
    pub fn all_layers(num_layers: usize, bottleneck: usize) -> Self {
        AdapterConfig {
            bottleneck,
            placement_layers: (0..num_layers).collect(),
            nonlinearity: Nonlinearity::Gelu,
        }
    }

    /// Adapters in the `n` highest blocks only.
    pub fn top_layers(n: usize, num_layers: usize, bottleneck: usize) -> Self {
        AdapterConfig {
            bottleneck,
            placement_layers: (num_layers.saturating_sub(n)..num_layers).collect(),
            nonlinearity: Nonlinearity::Gelu,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.bottleneck == 0 {
            return Err(Error::config("bottleneck", "must be >= 1"));
        }
        if let Some(&bad) = self.placement_layers.iter().find(|&&l| l >= num_layers) {
            return Err(Error::config(
                "placement_layers",
                format!("layer {bad} outside 0..{num_layers}"),
            ));
        }
        Ok(())
    }

    /// Number of adapter instances: two per adapted block.
    pub fn instance_count(&self) -> usize {
        2 * self.placement_layers.len()
    }
}
