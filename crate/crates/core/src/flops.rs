//! Inference cost of one image-caption pair.
//!
//! Conventions: a multiply-accumulate is 2 FLOPs; layer norm, softmax and
//! GeLU cost 5 FLOPs per element; residual and positional adds 1 per
//! element. Per transformer layer with `T` tokens, width `D`, MLP width `H`:
//!
//! * attention projections `8·T·D²`, logits and weighted values `4·T²·D`
//! * dense MLP `4·T·D·H`
//! * MoE MLP `K·4·T·D·H` plus router `2·T·D·E`, whatever the drops
//!
//! The stem (patch projection) and the pooled head (final norm and
//! projection) are included. Both towers are summed.

use std::fmt::Write as _;

use crate::params::param_shapes;
use crate::spec::{Modality, ModelSpec, MoeModality, MoeSpec};

const ELEMENTWISE: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub config: String,
    pub params: usize,
    pub image_gflops: f64,
    pub text_gflops: f64,
}

impl CostReport {
    pub fn total_gflops(&self) -> f64 {
        self.image_gflops + self.text_gflops
    }
}

pub const COST_HEADER: &str = "config,params,image_gflops,text_gflops,total_gflops";

pub fn cost_csv(reports: &[CostReport]) -> String {
    let mut s = format!("{COST_HEADER}\n");
    for r in reports {
        writeln!(s, "{},{},{:.3},{:.3},{:.3}", r.config, r.params, r.image_gflops, r.text_gflops, r.total_gflops())
            .expect("write to string");
    }
    s
}

/// FLOPs of one tower's forward pass for a single input.
pub fn tower_flops(spec: &ModelSpec, m: Modality) -> f64 {
    let tw = spec.tower(m);
    let (d, h, heads) = (tw.model_dim as f64, tw.mlp_hidden_dim as f64, tw.num_heads as f64);
    let t = match m {
        Modality::Image => spec.image_tokens(),
        Modality::Text => spec.text_tokens(),
    } as f64;
    let moe_layers = spec.moe_layers(spec.trunk(m));

    let mut total = 0.0;
    total += match m {
        Modality::Image => 2.0 * spec.num_patches() as f64 * spec.patch_dim() as f64 * d,
        Modality::Text => 0.0,
    };
    total += t * d;
    for layer in 0..tw.num_layers {
        total += 8.0 * t * d * d + 4.0 * t * t * d;
        total += ELEMENTWISE * (2.0 * t * d + heads * t * t);
        total += 2.0 * t * d;
        let mlp = 4.0 * t * d * h + ELEMENTWISE * t * h;
        match (&spec.moe, moe_layers.contains(&layer)) {
            (Some(moe), true) => {
                let (k, e) = (moe.top_k as f64, moe.num_experts as f64);
                total += k * mlp + 2.0 * t * d * e + ELEMENTWISE * t * e;
            }
            _ => total += mlp,
        }
    }
    total += ELEMENTWISE * d + 2.0 * d * spec.embed_dim as f64;
    total
}

pub fn count_params(spec: &ModelSpec) -> usize {
    param_shapes(spec).values().map(|s| s.iter().product::<usize>()).sum()
}

pub fn flops_estimate(spec: &ModelSpec) -> CostReport {
    CostReport {
        config: "custom".into(),
        params: count_params(spec),
        image_gflops: tower_flops(spec, Modality::Image) / 1e9,
        text_gflops: tower_flops(spec, Modality::Text) / 1e9,
    }
}

/// Names accepted by [`named_config`].
pub const NAMED_CONFIGS: [&str; 8] = ["b32-dense", "b16-dense", "l14-dense", "b32-up", "b16-up", "l14-up", "tiny", "tiny-up"];

/// Standard configs; `-up` variants carry 8 experts, top-2, on every other
/// layer of both towers.
pub fn named_config(name: &str) -> Option<ModelSpec> {
    let (base, up) = match name.rsplit_once('-') {
        Some((b, "up")) => (b, true),
        Some((b, "dense")) => (b, false),
        _ => (name, false),
    };
    let spec = match base {
        "b32" => ModelSpec::clip_b32(),
        "b16" => ModelSpec::clip_b16(),
        "l14" => ModelSpec::clip_l14(),
        "tiny" if name == "tiny" || up => ModelSpec::tiny(),
        _ => return None,
    };
    Some(if up { spec.with_moe(MoeSpec::default(), MoeModality::Both) } else { spec })
}
