//! Named parameter storage and the parameter layout implied by a [`ModelSpec`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::spec::{ModelSpec, Trunk};
use crate::tensor::Tensor;

/// Standard deviation of freshly initialized router weights.
pub const ROUTER_INIT_STD: f32 = 0.02;

/// Parameters keyed by dotted name, kept in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map.get_mut(name).ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    Normal(f32),
    Const(f32),
}

pub fn layer_prefix(trunk: Trunk, layer: usize) -> String {
    format!("{}.layers.{layer}", trunk.prefix())
}

/// Suffixes of the four tensors in a dense MLP or one expert.
pub const MLP_PARTS: [&str; 4] = ["in_proj", "in_bias", "out_proj", "out_bias"];

pub fn expert_prefix(trunk: Trunk, layer: usize, expert: usize) -> String {
    format!("{}.moe.experts.{expert}", layer_prefix(trunk, layer))
}

pub fn router_name(trunk: Trunk, layer: usize) -> String {
    format!("{}.moe.router", layer_prefix(trunk, layer))
}

fn layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f32).sqrt());
    let emb = Init::Normal(0.02);

    let di = spec.image_tower.model_dim;
    push("image.patch.weight".into(), vec![spec.patch_dim(), di], lin(spec.patch_dim()));
    push("image.patch.bias".into(), vec![di], Init::Zeros);
    push("image.cls".into(), vec![1, di], emb);
    push("image.pos".into(), vec![spec.image_tokens(), di], emb);
    push("image.proj".into(), vec![di, spec.embed_dim], lin(di));

    let dt = spec.tower(crate::spec::Modality::Text).model_dim;
    push("text.token_embed".into(), vec![spec.vocab_size, dt], emb);
    push("text.pos".into(), vec![spec.text_tokens(), dt], emb);
    push("text.proj".into(), vec![dt, spec.embed_dim], lin(dt));

    push(
        "logit_scale".into(),
        vec![1],
        Init::Const((1.0 / spec.temperature_init).ln() as f32),
    );

    for trunk in spec.trunks() {
        let tw = spec.trunk_tower(trunk);
        let (d, h) = (tw.model_dim, tw.mlp_hidden_dim);
        let moe_layers = spec.moe_layers(trunk);
        for layer in 0..tw.num_layers {
            let p = layer_prefix(trunk, layer);
            for ln in ["ln1", "ln2"] {
                push(format!("{p}.{ln}.gain"), vec![d], Init::Ones);
                push(format!("{p}.{ln}.bias"), vec![d], Init::Zeros);
            }
            for w in ["q", "k", "v", "o"] {
                push(format!("{p}.attn.{w}.weight"), vec![d, d], lin(d));
                push(format!("{p}.attn.{w}.bias"), vec![d], Init::Zeros);
            }
            let mlp = |prefix: &str, push: &mut dyn FnMut(String, Vec<usize>, Init)| {
                push(format!("{prefix}.in_proj"), vec![d, h], lin(d));
                push(format!("{prefix}.in_bias"), vec![h], Init::Zeros);
                push(format!("{prefix}.out_proj"), vec![h, d], lin(h));
                push(format!("{prefix}.out_bias"), vec![d], Init::Zeros);
            };
            if moe_layers.contains(&layer) {
                let moe = spec.moe.as_ref().expect("moe layers imply an moe spec");
                push(router_name(trunk, layer), vec![d, moe.num_experts], Init::Normal(ROUTER_INIT_STD));
                for e in 0..moe.num_experts {
                    mlp(&expert_prefix(trunk, layer, e), &mut push);
                }
            } else {
                mlp(&format!("{p}.mlp"), &mut push);
            }
        }
        push(format!("{}.ln_final.gain", trunk.prefix()), vec![d], Init::Ones);
        push(format!("{}.ln_final.bias", trunk.prefix()), vec![d], Init::Zeros);
    }
    out
}

/// Every parameter name and shape the spec requires.
pub fn param_shapes(spec: &ModelSpec) -> BTreeMap<String, Vec<usize>> {
    layout(spec).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Fills a tensor with `N(0, std)` draws.
pub fn normal_tensor(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Fresh random parameters for `spec`, deterministic in `seed`.
///
/// Tensors are drawn in sorted-name order from one seeded stream.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = layout(spec);
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut store = ParamStore::new();
    for (name, shape, init) in entries {
        let t = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::ones(&shape),
            Init::Const(c) => Tensor::full(&shape, c),
            Init::Normal(std) => normal_tensor(&shape, std, &mut rng),
        };
        store.insert(name, t);
    }
    Ok(store)
}

/// Checks that `params` has exactly the names and shapes `spec` requires.
pub fn check_params(spec: &ModelSpec, params: &ParamStore) -> Result<()> {
    let want = param_shapes(spec);
    let missing: Vec<&String> = want.keys().filter(|n| !params.contains(n)).collect();
    let extra: Vec<&String> = params.names().filter(|n| !want.contains_key(*n)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Contract(format!(
            "parameter names do not match the model spec; missing: {missing:?}; unexpected: {extra:?}"
        )));
    }
    for (name, shape) in &want {
        let got = params.get(name)?.shape();
        if got != shape.as_slice() {
            return Err(Error::Shape(format!("parameter `{name}` has shape {got:?}, spec needs {shape:?}")));
        }
    }
    Ok(())
}
