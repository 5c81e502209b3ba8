//! Transformer encoder with an optional convolutional frontend, two adapter
//! slots per block and a linear CTC head.
//!
//! Block order (post-LN):
//!
//! ```text
//! a  = Attn(x);   a' = adapter_attn(a) if present
//! x1 = LN(x + a')
//! f  = FFN(x1);   f' = adapter_ffn(f) if present
//! out = LN(x1 + f')
//! ```
//!
//! An adapter computes `h + up(φ(down(h)))`. Up-projections start at zero,
//! so inserting adapters leaves every output bitwise unchanged.

mod config;
mod layout;

use std::collections::{BTreeSet, HashMap};

use rand_distr::{Distribution, Normal};

pub use config::{AdapterConfig, AdapterSlot, Frontend, ModelConfig, Nonlinearity, Positional};
pub use layout::{layout, Component, ParamSpec};

use crate::numerics::{Tape, Tensor, Var};
use crate::seeding::keyed_rng;
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Std of the adapter down-projection at initialization.
pub const ADAPTER_DOWN_STD: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Parameter {
    spec: ParamSpec,
    tensor: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn path(&self) -> &str {
        &self.spec.path
    }

    pub fn spec(&self) -> &ParamSpec {
        &self.spec
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub(crate) fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }
}

/// Which bound parameters the tape should differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    Nothing,
    Trainable,
    All,
}

#[derive(Clone, Copy, Debug)]
struct LinearIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct AdapterIdx {
    down: LinearIdx,
    up: LinearIdx,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    qkvo: [LinearIdx; 4],
    ln_attn: LinearIdx,
    ffn: [LinearIdx; 2],
    ln_ffn: LinearIdx,
    adapters: [Option<AdapterIdx>; 2],
}

#[derive(Clone, Debug)]
struct Plan {
    convs: Vec<(LinearIdx, usize, usize)>,
    proj: Option<LinearIdx>,
    pos: Option<usize>,
    blocks: Vec<BlockIdx>,
    head: LinearIdx,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    adapters: Option<AdapterConfig>,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    plan: Plan,
}

/// Seeded initialization; see [`Model::new`].
pub fn build_model(mc: &ModelConfig, ac: Option<&AdapterConfig>, seed: u64) -> Result<Model> {
    Model::new(mc, ac, seed)
}

/// Returns a copy of `model` with adapters added at `ac`'s placements.
pub fn insert_adapters(model: &Model, ac: &AdapterConfig, seed: u64) -> Result<Model> {
    let mut m = model.clone();
    m.insert_adapters(ac, seed)?;
    Ok(m)
}

fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor {
    let leaf = spec.path.rsplit('.').next().unwrap_or("");
    let mut t = Tensor::zeros(&spec.shape);
    let std = match (spec.component, leaf) {
        (_, "bias" | "beta") => return t,
        (_, "gamma") => return Tensor::filled(&spec.shape, 1.0),
        (Component::Adapter(_), "weight") if spec.path.contains(".up.") => return t,
        (Component::Adapter(_), _) => ADAPTER_DOWN_STD,
        (Component::Positional, _) => 0.02,
        _ => {
            let (fan_in, fan_out) = (spec.shape[0], spec.shape[1]);
            (2.0 / (fan_in + fan_out) as f64).sqrt()
        }
    };
    let normal = Normal::new(0.0, std).expect("finite std");
    // Keyed by path: adding adapters never shifts the other draws.
    let mut rng = keyed_rng(seed, &["param", &spec.path]);
    t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    t
}

fn sinusoidal(rows: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, d]);
    let data = t.data_mut();
    for pos in 0..rows {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

impl Model {
    /// Validates both configs and initializes every parameter from `seed`.
    /// Weights are Glorot-normal, biases zero, layer norms identity, adapter
    /// down-projections `N(0, 1e-3²)` and up-projections zero.
    pub fn new(mc: &ModelConfig, ac: Option<&AdapterConfig>, seed: u64) -> Result<Self> {
        mc.validate()?;
        if let Some(ac) = ac {
            ac.validate(mc.num_layers)?;
        }
        let params = layout(mc, ac)
            .into_iter()
            .map(|spec| Parameter {
                tensor: init_tensor(&spec, seed),
                spec,
                trainable: false,
            })
            .collect();
        Self::assemble(mc.clone(), ac.cloned(), params)
    }

    fn assemble(config: ModelConfig, adapters: Option<AdapterConfig>, params: Vec<Parameter>) -> Result<Self> {
        let index: HashMap<String, usize> = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.spec.path.clone(), i))
            .collect();
        let plan = Self::resolve(&config, &index);
        Ok(Model {
            config,
            adapters,
            params,
            index,
            plan,
        })
    }

    fn resolve(mc: &ModelConfig, index: &HashMap<String, usize>) -> Plan {
        let at = |p: String| index[&p];
        let lin = |p: &str| LinearIdx {
            w: at(format!("{p}.weight")),
            b: at(format!("{p}.bias")),
        };
        let norm = |p: &str| LinearIdx {
            w: at(format!("{p}.gamma")),
            b: at(format!("{p}.beta")),
        };
        let convs = match &mc.frontend {
            Frontend::Identity => Vec::new(),
            Frontend::ConvStack { kernels, strides, .. } => kernels
                .iter()
                .zip(strides)
                .enumerate()
                .map(|(i, (&k, &s))| (lin(&format!("frontend.conv.{i}")), k, s))
                .collect(),
        };
        let blocks = (0..mc.num_layers)
            .map(|l| {
                let adapter = |slot: AdapterSlot| {
                    let prefix = layout::adapter_prefix(l, slot);
                    index.contains_key(&format!("{prefix}.down.weight")).then(|| AdapterIdx {
                        down: lin(&format!("{prefix}.down")),
                        up: lin(&format!("{prefix}.up")),
                    })
                };
                BlockIdx {
                    qkvo: ["q", "k", "v", "o"].map(|n| lin(&format!("layer.{l}.attn.{n}"))),
                    ln_attn: norm(&format!("layer.{l}.ln_attn")),
                    ffn: [0, 1].map(|i| lin(&format!("layer.{l}.ffn.{i}"))),
                    ln_ffn: norm(&format!("layer.{l}.ln_ffn")),
                    adapters: AdapterSlot::BOTH.map(adapter),
                }
            })
            .collect();
        Plan {
            convs,
            proj: index.contains_key("proj.weight").then(|| lin("proj")),
            pos: index.get("pos.embedding").copied(),
            blocks,
            head: lin("head"),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adapter_config(&self) -> Option<&AdapterConfig> {
        self.adapters.as_ref()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, path: &str) -> Option<&Parameter> {
        self.index.get(path).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, path: &str) -> Option<&mut Parameter> {
        self.index.get(path).map(|&i| &mut self.params[i])
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.params.iter().map(|p| p.spec.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn adapter_count(&self) -> usize {
        self.plan
            .blocks
            .iter()
            .flat_map(|b| b.adapters.iter())
            .filter(|a| a.is_some())
            .count()
    }

    pub fn has_adapters(&self) -> bool {
        self.adapter_count() > 0
    }

    /// Copy of one adapter's weights, if the slot is occupied.
    pub fn adapter(&self, layer: usize, slot: AdapterSlot) -> Option<Adapter> {
        let idx = self.plan.blocks.get(layer)?.adapters[slot.index()]?;
        let t = |i: usize| self.params[i].tensor.clone();
        Some(Adapter {
            down_weight: t(idx.down.w),
            down_bias: t(idx.down.b),
            up_weight: t(idx.up.w),
            up_bias: t(idx.up.b),
            nonlinearity: self.nonlinearity(),
        })
    }

    fn nonlinearity(&self) -> Nonlinearity {
        self.adapters.as_ref().map_or_else(Nonlinearity::default, |a| a.nonlinearity)
    }

    /// Adds adapters at `ac.placement_layers`. Existing tensors are moved
    /// over untouched; new adapters are initialized from `seed`.
    pub fn insert_adapters(&mut self, ac: &AdapterConfig, seed: u64) -> Result<()> {
        ac.validate(self.config.num_layers)?;
        let merged = match &self.adapters {
            Some(existing) if !existing.placement_layers.is_empty() => {
                if let Some(&l) = ac.placement_layers.intersection(&existing.placement_layers).next() {
                    return Err(Error::SlotOccupied(format!("layer.{l}.adapter")));
                }
                if existing.bottleneck != ac.bottleneck || existing.nonlinearity != ac.nonlinearity {
                    return Err(Error::config(
                        "bottleneck",
                        "inserted adapters must match the existing bottleneck and non-linearity",
                    ));
                }
                let placement: BTreeSet<usize> =
                    existing.placement_layers.union(&ac.placement_layers).copied().collect();
                AdapterConfig {
                    placement_layers: placement,
                    ..existing.clone()
                }
            }
            _ => ac.clone(),
        };

        let mut old: HashMap<String, Parameter> = std::mem::take(&mut self.params)
            .into_iter()
            .map(|p| (p.spec.path.clone(), p))
            .collect();
        let params = layout(&self.config, Some(&merged))
            .into_iter()
            .map(|spec| match old.remove(&spec.path) {
                Some(p) => p,
                None => Parameter {
                    tensor: init_tensor(&spec, seed),
                    spec,
                    trainable: false,
                },
            })
            .collect();
        *self = Self::assemble(self.config.clone(), Some(merged), params)?;
        Ok(())
    }

    /// Records every parameter as a tape leaf, in registry order.
    pub fn bind(&self, tape: &mut Tape, track: Track) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let rg = match track {
                    Track::Nothing => false,
                    Track::Trainable => p.trainable,
                    Track::All => true,
                };
                tape.leaf(p.tensor.clone().with_requires_grad(rg))
            })
            .collect()
    }

    /// Logits `T'×(vocab+1)` without recording gradients.
    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, Track::Nothing);
        let out = self.forward_on(&mut tape, &vars, frames)?;
        Ok(tape.value(out).clone())
    }

    /// Records the forward pass on `tape`; `vars` must come from
    /// [`Model::bind`] (or be parallel to [`Model::params`]).
    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], frames: &Tensor) -> Result<Var> {
        let mc = &self.config;
        if vars.len() != self.params.len() {
            return Err(Error::Precondition(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let t_in = match frames.shape() {
            [t, d] if *d == mc.d_in => *t,
            s => {
                return Err(Error::Dimension {
                    op: "forward",
                    left: s.to_vec(),
                    right: vec![mc.d_in],
                })
            }
        };
        if t_in > mc.max_seq_len {
            return Err(Error::Precondition(format!(
                "{t_in} frames exceed max_seq_len {}",
                mc.max_seq_len
            )));
        }
        let t_out = mc
            .frontend_len(t_in)
            .ok_or(Error::SequenceTooShort { frames: t_in })?;

        let linear = |tape: &mut Tape, x: Var, idx: LinearIdx| -> Result<Var> {
            let y = tape.matmul(x, vars[idx.w])?;
            tape.add_row(y, vars[idx.b])
        };

        let mut x = tape.constant(frames.clone());
        for &(idx, kernel, stride) in &self.plan.convs {
            let windows = tape.unfold(x, kernel, stride)?;
            let y = linear(tape, windows, idx)?;
            x = tape.gelu(y);
        }
        if let Some(proj) = self.plan.proj {
            x = linear(tape, x, proj)?;
        }
        x = tape.scale(x, (mc.d_model as f64).sqrt());
        let pos = match self.plan.pos {
            Some(i) => tape.slice_rows(vars[i], 0, t_out)?,
            None => tape.constant(sinusoidal(t_out, mc.d_model)),
        };
        x = tape.add(x, pos)?;

        let nonlin = self.nonlinearity();
        let (heads, hd) = (mc.num_heads, mc.head_dim());
        let attn_scale = 1.0 / (hd as f64).sqrt();
        for block in &self.plan.blocks {
            let [q, k, v, o] = block.qkvo.map(|i| i);
            let (q, k, v) = (linear(tape, x, q)?, linear(tape, x, k)?, linear(tape, x, v)?);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * hd, hd)?;
                let kh = tape.slice_cols(k, h * hd, hd)?;
                let vh = tape.slice_cols(v, h * hd, hd)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, attn_scale);
                let weights = tape.softmax(scores);
                outs.push(tape.matmul(weights, vh)?);
            }
            let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
            let mut a = linear(tape, merged, o)?;
            if let Some(ad) = block.adapters[0] {
                a = adapter_on(tape, vars, ad, a, nonlin)?;
            }
            let r = tape.add(x, a)?;
            let x1 = tape.layer_norm(r, vars[block.ln_attn.w], vars[block.ln_attn.b], LAYER_NORM_EPS)?;

            let hidden = linear(tape, x1, block.ffn[0])?;
            let hidden = tape.gelu(hidden);
            let mut f = linear(tape, hidden, block.ffn[1])?;
            if let Some(ad) = block.adapters[1] {
                f = adapter_on(tape, vars, ad, f, nonlin)?;
            }
            let r = tape.add(x1, f)?;
            x = tape.layer_norm(r, vars[block.ln_ffn.w], vars[block.ln_ffn.b], LAYER_NORM_EPS)?;
        }
        linear(tape, x, self.plan.head)
    }
}

fn adapter_on(tape: &mut Tape, vars: &[Var], idx: AdapterIdx, h: Var, nonlin: Nonlinearity) -> Result<Var> {
    adapter_vars(
        tape,
        [vars[idx.down.w], vars[idx.down.b], vars[idx.up.w], vars[idx.up.b]],
        h,
        nonlin,
    )
}

fn adapter_vars(tape: &mut Tape, [dw, db, uw, ub]: [Var; 4], h: Var, nonlin: Nonlinearity) -> Result<Var> {
    let down = tape.matmul(h, dw)?;
    let down = tape.add_row(down, db)?;
    let act = match nonlin {
        Nonlinearity::Gelu => tape.gelu(down),
        Nonlinearity::Relu => tape.relu(down),
    };
    let up = tape.matmul(act, uw)?;
    let up = tape.add_row(up, ub)?;
    tape.add(h, up)
}

/// Standalone copy of one bottleneck adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub down_weight: Tensor,
    pub down_bias: Tensor,
    pub up_weight: Tensor,
    pub up_bias: Tensor,
    pub nonlinearity: Nonlinearity,
}

impl Adapter {
    pub fn new(
        down_weight: Tensor,
        down_bias: Tensor,
        up_weight: Tensor,
        up_bias: Tensor,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        let (d, b) = match down_weight.shape() {
            [d, b] => (*d, *b),
            s => return Err(Error::Precondition(format!("down weight must be a matrix, got {s:?}"))),
        };
        let ok = down_bias.shape() == [b] && up_weight.shape() == [b, d] && up_bias.shape() == [d];
        if !ok {
            return Err(Error::Dimension {
                op: "adapter",
                left: vec![d, b],
                right: up_weight.shape().to_vec(),
            });
        }
        Ok(Adapter {
            down_weight,
            down_bias,
            up_weight,
            up_bias,
            nonlinearity,
        })
    }

    /// `h + up(φ(down(h)))` for `h` of shape `T×d`.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ws = [
            &self.down_weight,
            &self.down_bias,
            &self.up_weight,
            &self.up_bias,
        ]
        .map(|t| tape.constant(t.clone()));
        let hv = tape.constant(h.clone());
        let out = adapter_vars(&mut tape, ws, hv, self.nonlinearity)?;
        Ok(tape.value(out).clone())
    }
}

/// See [`Adapter::forward`].
pub fn adapter_forward(a: &Adapter, h: &Tensor) -> Result<Tensor> {
    a.forward(h)
}
