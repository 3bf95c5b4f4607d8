//! Two-tower (or shared-trunk) transformer encoder and the symmetric
//! contrastive objective.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::moe::{self, ExpertVars, LayerRouting, MoeVars, RouteConfig, RouterJitter, RoutingOutcome};
use crate::params::{expert_prefix, layer_prefix, router_name, ParamStore};
use crate::spec::{Modality, ModelSpec};
use crate::tensor::Tensor;

/// Additive attention bias on padded keys.
const MASKED: f32 = -1e9;

/// Paired images and captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B × C × H × W]`.
    pub images: Tensor,
    /// `[B × L]` row-major token ids.
    pub token_ids: Vec<usize>,
    /// `[B × L]`, `true` marks padding.
    pub pad_mask: Vec<bool>,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(images: Tensor, token_ids: Vec<usize>, pad_mask: Vec<bool>, seq_len: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Shape(format!("images must be [B, C, H, W], got {:?}", images.shape())));
        }
        let b = images.shape()[0];
        if seq_len == 0 || token_ids.len() != b * seq_len || pad_mask.len() != b * seq_len {
            return Err(Error::Shape(format!(
                "captions must be [{b} x {seq_len}]: got {} ids and {} mask entries",
                token_ids.len(),
                pad_mask.len()
            )));
        }
        Ok(Self { images, token_ids, pad_mask, seq_len })
    }

    pub fn batch_size(&self) -> usize {
        self.images.shape()[0]
    }
}

/// Routing overrides applied at forward time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    pub jitter: Option<RouterJitter>,
    /// Replaces both per-modality capacity factors. `0.0` forces `B_e = 0`.
    pub capacity_factor: Option<f64>,
    pub normalize_after: Option<bool>,
}

/// Parameters placed into a graph, addressable by name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Adds every tensor of `params` to `g`, as trainable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(g: &mut Graph, params: &ParamStore, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(n, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Unit-norm embeddings plus the routing record of every MoE layer passed.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub embeddings: Var,
    pub routing: Vec<LayerRouting>,
}

/// Cuts `[B, C, H, W]` images into `[B·P, C·p·p]` flattened patches, patches
/// in row-major grid order, each flattened channel-major.
pub fn patchify(images: &Tensor, spec: &ModelSpec) -> Result<Tensor> {
    let s = images.shape();
    let want = [spec.channels, spec.image_size, spec.image_size];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::Shape(format!("images must be [B, {}, {}, {}], got {s:?}", want[0], want[1], want[2])));
    }
    let (b, c, hw, p) = (s[0], spec.channels, spec.image_size, spec.patch_size);
    let grid = spec.grid_side();
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for n in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for py in 0..p {
                        let row = ((n * c + ch) * hw + gy * p + py) * hw + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * grid * grid, c * p * p], out)
}

fn linear(g: &mut Graph, bp: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
    let w = bp.get(&format!("{prefix}.weight"))?;
    let b = bp.get(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}

fn layer_norm(g: &mut Graph, bp: &BoundParams, spec: &ModelSpec, x: Var, prefix: &str) -> Result<Var> {
    let gain = bp.get(&format!("{prefix}.gain"))?;
    let bias = bp.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, spec.layer_norm_eps as f32)
}

fn expert_vars(bp: &BoundParams, prefix: &str) -> Result<ExpertVars> {
    Ok(ExpertVars {
        in_proj: bp.get(&format!("{prefix}.in_proj"))?,
        in_bias: bp.get(&format!("{prefix}.in_bias"))?,
        out_proj: bp.get(&format!("{prefix}.out_proj"))?,
        out_bias: bp.get(&format!("{prefix}.out_bias"))?,
    })
}

/// Multi-head self-attention over `x [B·T × D]`.
fn attention(
    g: &mut Graph,
    bp: &BoundParams,
    x: Var,
    prefix: &str,
    (b, t, heads): (usize, usize, usize),
    key_bias: Option<Var>,
) -> Result<Var> {
    let d = g.shape(x)[1];
    let dh = d / heads;
    let q = linear(g, bp, x, &format!("{prefix}.q"))?;
    let k = linear(g, bp, x, &format!("{prefix}.k"))?;
    let v = linear(g, bp, x, &format!("{prefix}.v"))?;
    let split = |g: &mut Graph, z: Var, perm: &[usize], shape: &[usize]| -> Result<Var> {
        let z = g.reshape(z, &[b, t, heads, dh])?;
        let z = g.permute(z, perm)?;
        g.reshape(z, shape)
    };
    let q = split(g, q, &[0, 2, 1, 3], &[b * heads, t, dh])?;
    let k = split(g, k, &[0, 2, 1, 3], &[b * heads, t, dh])?;
    let v = split(g, v, &[0, 2, 1, 3], &[b * heads, t, dh])?;
    let scores = g.bmm_t(q, k)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
    if let Some(bias) = key_bias {
        scores = g.add(scores, bias)?;
    }
    let att = g.softmax(scores, 2)?;
    let ctx = g.bmm(att, v)?;
    let ctx = g.reshape(ctx, &[b, heads, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b * t, d])?;
    linear(g, bp, ctx, &format!("{prefix}.o"))
}

/// Runs the pre-LN transformer stack of `trunk` over `x [B·T × D]`.
#[allow(clippy::too_many_arguments)]
fn run_trunk(
    g: &mut Graph,
    spec: &ModelSpec,
    bp: &BoundParams,
    modality: Modality,
    mut x: Var,
    (b, t): (usize, usize),
    key_bias: Option<Var>,
    opts: &ForwardOptions,
    routing: &mut Vec<LayerRouting>,
) -> Result<Var> {
    let trunk = spec.trunk(modality);
    let tower = spec.trunk_tower(trunk);
    let moe_layers = spec.moe_layers(trunk);
    for layer in 0..tower.num_layers {
        let p = layer_prefix(trunk, layer);
        let h = layer_norm(g, bp, spec, x, &format!("{p}.ln1"))?;
        let a = attention(g, bp, h, &format!("{p}.attn"), (b, t, tower.num_heads), key_bias)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, bp, spec, x, &format!("{p}.ln2"))?;
        let f = if moe_layers.contains(&layer) {
            let ms = spec.moe.as_ref().expect("moe layers imply an moe spec");
            let vars = MoeVars {
                router: bp.get(&router_name(trunk, layer))?,
                experts: (0..ms.num_experts)
                    .map(|e| expert_vars(bp, &expert_prefix(trunk, layer, e)))
                    .collect::<Result<_>>()?,
            };
            let mut cfg = RouteConfig::from_spec(ms, layer, modality);
            cfg.jitter = opts.jitter;
            if let Some(c) = opts.capacity_factor {
                cfg.capacity_factor = c;
            }
            if let Some(n) = opts.normalize_after {
                cfg.normalize_after = n;
            }
            let (mix, r) = moe::moe_mix(g, h, &vars, &cfg)?;
            routing.push(r);
            mix
        } else {
            expert_vars(bp, &format!("{p}.mlp"))?.forward(g, h)?
        };
        x = g.add(x, f)?;
        g.check_finite(x, &format!("{modality} layer {layer}"))?;
    }
    Ok(x)
}

/// Final LN on pooled rows, projection, L2 normalization.
fn head(g: &mut Graph, spec: &ModelSpec, bp: &BoundParams, modality: Modality, pooled: Var) -> Result<Var> {
    let trunk = spec.trunk(modality);
    let h = layer_norm(g, bp, spec, pooled, &format!("{}.ln_final", trunk.prefix()))?;
    let proj = bp.get(&format!("{}.proj", modality.as_str()))?;
    let z = g.matmul(h, proj)?;
    let z = g.l2_normalize(z);
    g.check_finite(z, &format!("{modality} embedding"))?;
    Ok(z)
}

/// Embeds `[B, C, H, W]` images; the class token's final state is pooled.
pub fn encode_images(
    g: &mut Graph,
    spec: &ModelSpec,
    bp: &BoundParams,
    images: &Tensor,
    opts: &ForwardOptions,
) -> Result<Encoded> {
    let patches = patchify(images, spec)?;
    let b = images.shape()[0];
    let np = spec.num_patches();
    let t = np + 1;
    let patches = g.constant(patches);
    let x = linear(g, bp, patches, "image.patch")?;

    let patch_rows: Vec<usize> = (0..b).flat_map(|n| (1..t).map(move |i| n * t + i)).collect();
    let cls_rows: Vec<usize> = (0..b).map(|n| n * t).collect();
    let x = g.scatter_add_rows(x, &patch_rows, b * t)?;
    let cls = bp.get("image.cls")?;
    let cls = g.gather_rows(cls, &vec![0; b])?;
    let cls = g.scatter_add_rows(cls, &cls_rows, b * t)?;
    let x = g.add(x, cls)?;
    let pos = bp.get("image.pos")?;
    let pos = g.gather_rows(pos, &(0..b * t).map(|r| r % t).collect::<Vec<_>>())?;
    let x = g.add(x, pos)?;

    let mut routing = Vec::new();
    let x = run_trunk(g, spec, bp, Modality::Image, x, (b, t), None, opts, &mut routing)?;
    let pooled = g.gather_rows(x, &cls_rows)?;
    let embeddings = head(g, spec, bp, Modality::Image, pooled)?;
    Ok(Encoded { embeddings, routing })
}

/// Embeds `[B × L]` captions; the last non-padding token's state is pooled.
pub fn encode_texts(
    g: &mut Graph,
    spec: &ModelSpec,
    bp: &BoundParams,
    token_ids: &[usize],
    pad_mask: &[bool],
    seq_len: usize,
    opts: &ForwardOptions,
) -> Result<Encoded> {
    if seq_len == 0 || token_ids.len() % seq_len != 0 || pad_mask.len() != token_ids.len() || token_ids.is_empty() {
        return Err(Error::Shape(format!(
            "captions: {} ids, {} mask entries, sequence length {seq_len}",
            token_ids.len(),
            pad_mask.len()
        )));
    }
    if seq_len > spec.text_tokens() {
        return Err(Error::Shape(format!("caption length {seq_len} exceeds {} text positions", spec.text_tokens())));
    }
    if let Some(&bad) = token_ids.iter().find(|&&id| id >= spec.vocab_size) {
        return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", spec.vocab_size)));
    }
    let (b, t) = (token_ids.len() / seq_len, seq_len);
    let mut pooled_rows = Vec::with_capacity(b);
    for n in 0..b {
        let last = (0..t)
            .rev()
            .find(|&i| !pad_mask[n * t + i])
            .ok_or_else(|| Error::Contract(format!("caption {n} is entirely padding")))?;
        pooled_rows.push(n * t + last);
    }

    let table = bp.get("text.token_embed")?;
    let x = g.gather_rows(table, token_ids)?;
    let pos = bp.get("text.pos")?;
    let pos = g.gather_rows(pos, &(0..b * t).map(|r| r % t).collect::<Vec<_>>())?;
    let x = g.add(x, pos)?;

    let heads = spec.tower(Modality::Text).num_heads;
    let key_bias = pad_mask.iter().any(|&p| p).then(|| {
        let mut bias = Vec::with_capacity(b * heads * t * t);
        for n in 0..b {
            let row: Vec<f32> = (0..t).map(|k| if pad_mask[n * t + k] { MASKED } else { 0.0 }).collect();
            for _ in 0..heads * t {
                bias.extend_from_slice(&row);
            }
        }
        g.constant(Tensor::new(vec![b * heads, t, t], bias).expect("mask shape"))
    });

    let mut routing = Vec::new();
    let x = run_trunk(g, spec, bp, Modality::Text, x, (b, t), key_bias, opts, &mut routing)?;
    let pooled = g.gather_rows(x, &pooled_rows)?;
    let embeddings = head(g, spec, bp, Modality::Text, pooled)?;
    Ok(Encoded { embeddings, routing })
}

/// Encodes both towers of a batch.
pub fn encode_batch(
    g: &mut Graph,
    spec: &ModelSpec,
    bp: &BoundParams,
    batch: &Batch,
    opts: &ForwardOptions,
) -> Result<(Encoded, Encoded)> {
    let img = encode_images(g, spec, bp, &batch.images, opts)?;
    let txt = encode_texts(g, spec, bp, &batch.token_ids, &batch.pad_mask, batch.seq_len, opts)?;
    Ok((img, txt))
}

/// Largest learnable logit scale, `ln(1 / 0.01)`.
pub fn max_logit_scale() -> f32 {
    100f32.ln()
}

/// Symmetric InfoNCE on unit embeddings with a learnable log inverse
/// temperature `log_scale [1]`, clamped so the temperature stays ≥ 0.01.
pub fn contrastive_loss(g: &mut Graph, img: Var, txt: Var, log_scale: Var) -> Result<Var> {
    let b = g.shape(img)[0];
    if g.shape(img) != g.shape(txt) {
        return Err(Error::Shape(format!("embedding shapes differ: {:?} vs {:?}", g.shape(img), g.shape(txt))));
    }
    let clamped = g.clamp_max(log_scale, max_logit_scale());
    let scale = g.exp(clamped);
    let tt = g.transpose(txt)?;
    let sim = g.matmul(img, tt)?;
    let logits = g.scale_by(sim, scale)?;
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let i2t = g.log_softmax(logits, 1)?;
    let t2i = g.log_softmax(logits, 0)?;
    let a = g.gather_elems(i2t, &diag)?;
    let c = g.gather_elems(t2i, &diag)?;
    let a = g.sum(a);
    let c = g.sum(c);
    let total = g.add(a, c)?;
    Ok(g.scale(total, -1.0 / (2 * b) as f32))
}

/// Direct evaluation of the symmetric InfoNCE loss at temperature `theta`,
/// accumulated in 64-bit.
pub fn contrastive_loss_value(img: &Tensor, txt: &Tensor, theta: f64) -> Result<f64> {
    if img.shape() != txt.shape() || img.ndim() != 2 {
        return Err(Error::Shape(format!("embedding shapes {:?} and {:?}", img.shape(), txt.shape())));
    }
    if !(theta > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {theta}")));
    }
    let b = img.rows();
    let sim: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            (0..b)
                .map(|j| img.row(i).iter().zip(txt.row(j)).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() / theta)
                .collect()
        })
        .collect();
    let lse = |v: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = v.collect();
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut total = 0.0;
    for i in 0..b {
        total += lse(&mut sim[i].iter().copied()) - sim[i][i];
        total += lse(&mut (0..b).map(|j| sim[j][i])) - sim[i][i];
    }
    Ok(total / (2 * b) as f64)
}

/// Inference-only embeddings and routing outcomes for one modality.
pub struct Embedded {
    pub embeddings: Tensor,
    pub outcomes: Vec<RoutingOutcome>,
}

/// Embeds images without tracking gradients.
pub fn embed_images(spec: &ModelSpec, params: &ParamStore, images: &Tensor, opts: &ForwardOptions) -> Result<Embedded> {
    let mut g = Graph::new();
    let bp = BoundParams::bind(&mut g, params, false);
    let e = encode_images(&mut g, spec, &bp, images, opts)?;
    Ok(Embedded {
        embeddings: g.value(e.embeddings).clone(),
        outcomes: e.routing.into_iter().map(|r| r.outcome).collect(),
    })
}

/// Embeds captions without tracking gradients.
pub fn embed_texts(
    spec: &ModelSpec,
    params: &ParamStore,
    token_ids: &[usize],
    pad_mask: &[bool],
    seq_len: usize,
    opts: &ForwardOptions,
) -> Result<Embedded> {
    let mut g = Graph::new();
    let bp = BoundParams::bind(&mut g, params, false);
    let e = encode_texts(&mut g, spec, &bp, token_ids, pad_mask, seq_len, opts)?;
    Ok(Embedded {
        embeddings: g.value(e.embeddings).clone(),
        outcomes: e.routing.into_iter().map(|r| r.outcome).collect(),
    })
}
