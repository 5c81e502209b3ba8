use super::config::{AdapterConfig, AdapterSlot, Frontend, ModelConfig, Positional};

/// Which architectural part a parameter belongs to. Transfer policies
/// select trainable sets from this, never from path strings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Frontend,
    /// Linear map from frontend channels to `d_model`.
    Projection,
    Positional,
    Attention,
    AttentionNorm,
    Ffn,
    FfnNorm,
    Adapter(AdapterSlot),
    Head,
}

impl Component {
    pub fn is_layer_norm(self) -> bool {
        matches!(self, Component::AttentionNorm | Component::FfnNorm)
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, Component::Adapter(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    /// Block index for block-resident parameters.
    pub layer: Option<usize>,
    pub component: Component,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Path without the trailing `.weight` / `.bias` / `.gamma` leaf.
    pub fn module_prefix(&self) -> &str {
        self.path.rsplit_once('.').map_or(&self.path, |(head, _)| head)
    }
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, path: String, shape: Vec<usize>, layer: Option<usize>, component: Component) {
        self.specs.push(ParamSpec {
            path,
            shape,
            layer,
            component,
        });
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, layer: Option<usize>, c: Component) {
        self.push(format!("{prefix}.weight"), vec![d_in, d_out], layer, c);
        self.push(format!("{prefix}.bias"), vec![d_out], layer, c);
    }

    fn norm(&mut self, prefix: &str, d: usize, layer: usize, c: Component) {
        self.push(format!("{prefix}.gamma"), vec![d], Some(layer), c);
        self.push(format!("{prefix}.beta"), vec![d], Some(layer), c);
    }
}

pub(crate) fn adapter_prefix(layer: usize, slot: AdapterSlot) -> String {
    format!("layer.{layer}.adapter.{}", slot.index())
}

/// Every parameter of the architecture in canonical order, without
/// allocating any weights.
pub fn layout(mc: &ModelConfig, ac: Option<&AdapterConfig>) -> Vec<ParamSpec> {
    let mut b = Builder { specs: Vec::new() };
    let d = mc.d_model;

    if let Frontend::ConvStack {
        channels, kernels, ..
    } = &mc.frontend
    {
        let mut c_in = mc.d_in;
        for (i, (&c_out, &k)) in channels.iter().zip(kernels).enumerate() {
            b.linear(&format!("frontend.conv.{i}"), k * c_in, c_out, None, Component::Frontend);
            c_in = c_out;
        }
        b.linear("proj", c_in, d, None, Component::Projection);
    }
    if mc.positional == Positional::Learned {
        b.push(
            "pos.embedding".into(),
            vec![mc.max_seq_len, d],
            None,
            Component::Positional,
        );
    }

    for l in 0..mc.num_layers {
        let adapted = ac.is_some_and(|a| a.placement_layers.contains(&l));
        let lp = |s: &str| format!("layer.{l}.{s}");
        for name in ["q", "k", "v", "o"] {
            b.linear(&lp(&format!("attn.{name}")), d, d, Some(l), Component::Attention);
        }
        if adapted {
            push_adapter(&mut b, l, AdapterSlot::AfterAttention, d, ac.unwrap().bottleneck);
        }
        b.norm(&lp("ln_attn"), d, l, Component::AttentionNorm);
        b.linear(&lp("ffn.0"), d, mc.d_ffn, Some(l), Component::Ffn);
        b.linear(&lp("ffn.1"), mc.d_ffn, d, Some(l), Component::Ffn);
        if adapted {
            push_adapter(&mut b, l, AdapterSlot::AfterFfn, d, ac.unwrap().bottleneck);
        }
        b.norm(&lp("ln_ffn"), d, l, Component::FfnNorm);
    }

    b.linear("head", d, mc.vocab_size + 1, None, Component::Head);
    b.specs
}

fn push_adapter(b: &mut Builder, layer: usize, slot: AdapterSlot, d: usize, bottleneck: usize) {
    let prefix = adapter_prefix(layer, slot);
    let c = Component::Adapter(slot);
    b.linear(&format!("{prefix}.down"), d, bottleneck, Some(layer), c);
    b.linear(&format!("{prefix}.up"), bottleneck, d, Some(layer), c);
}
