//! Mixture-of-experts feed-forward layer.
//!
//! Routing runs in three steps:
//!
//! 1. Gate: `logits = x · W`, `probs = softmax(logits)` over all `E` experts,
//!    top-K by descending probability (ties go to the lower expert index).
//! 2. Assign: each expert holds `ceil(S / E × C)` slots. Tokens are scanned in
//!    flattened batch-major order; each token claims its top-K experts in
//!    descending gate order and a claim on a full expert is dropped.
//! 3. Dispatch: `y_j = x_j + Σ g_{e,j} · MLP_e(x_j)` over the surviving
//!    assignments of token `j`. A token that lost every claim passes through
//!    on the residual alone.
//!
//! Selection indices are constants for differentiation; gradients flow
//! through the selected gate values and, via the auxiliary losses, through
//! all router probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::spec::{Modality, MoeSpec};
use crate::tensor::{dims2, Tensor};

/// Slots per expert: `ceil((tokens / E) × C)`.
pub fn expert_capacity(tokens: usize, num_experts: usize, capacity_factor: f64) -> usize {
    assert!(num_experts >= 1, "at least one expert");
    ((tokens as f64 / num_experts as f64) * capacity_factor).ceil() as usize
}

/// Top-K expert indices per row of `probs`, by descending probability with
/// ties resolved toward the lower index. Returns a flat `[S × K]` list.
pub fn select_top_k(probs: &Tensor, k: usize) -> Vec<usize> {
    let e = probs.last_dim();
    assert!(k <= e, "top_k {k} exceeds {e} experts");
    let mut out = Vec::with_capacity(probs.rows() * k);
    let mut order: Vec<usize> = Vec::with_capacity(e);
    for r in 0..probs.rows() {
        let row = probs.row(r);
        order.clear();
        order.extend(0..e);
        // Stable sort keeps lower indices first among equal probabilities.
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        out.extend_from_slice(&order[..k]);
    }
    out
}

/// Router logits, probabilities and top-K selection for tokens `x [S × D]`.
pub fn compute_gates(x: &Tensor, router: &Tensor, k: usize) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let (_, e) = dims2(router)?;
    if k == 0 || k > e {
        return Err(Error::Contract(format!("top_k {k} must be in 1..={e}")));
    }
    let logits = x.matmul(router)?;
    let probs = logits.softmax(1)?;
    let top = select_top_k(&probs, k);
    Ok((logits, probs, top))
}

/// Per-token routing record for one MoE layer invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingOutcome {
    pub layer_id: usize,
    pub modality: Modality,
    pub num_experts: usize,
    pub top_k: usize,
    pub capacity: usize,
    /// `[S × E]` router logits as used for gating.
    pub gate_logits: Tensor,
    /// `[S × E]` softmax over all experts.
    pub gate_probs: Tensor,
    /// `[S × K]` chosen experts, descending gate order.
    pub choices: Vec<usize>,
    /// `[S × K]` buffer slot granted to each choice; `None` when dropped.
    pub slots: Vec<Option<usize>>,
}

impl RoutingOutcome {
    pub fn num_tokens(&self) -> usize {
        self.choices.len() / self.top_k
    }

    /// Surviving `(expert, slot)` pairs of token `j`.
    pub fn selected(&self, j: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.top_k;
        (j * k..(j + 1) * k).filter_map(move |i| self.slots[i].map(|s| (self.choices[i], s)))
    }

    /// Number of token `j`'s top-K claims that found no room.
    pub fn dropped(&self, j: usize) -> usize {
        let k = self.top_k;
        self.slots[j * k..(j + 1) * k].iter().filter(|s| s.is_none()).count()
    }

    /// True when every claim of token `j` was dropped.
    pub fn fully_dropped(&self, j: usize) -> bool {
        self.dropped(j) == self.top_k
    }

    pub fn total_dropped(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }

    /// Fraction of all `S × K` claims that were dropped.
    pub fn drop_fraction(&self) -> f64 {
        self.total_dropped() as f64 / self.slots.len() as f64
    }

    /// Tokens held by each expert after capacity limits.
    pub fn expert_load(&self) -> Vec<usize> {
        let mut load = vec![0; self.num_experts];
        for (c, s) in self.choices.iter().zip(&self.slots) {
            if s.is_some() {
                load[*c] += 1;
            }
        }
        load
    }

    /// Dropped claims per expert.
    pub fn expert_drops(&self) -> Vec<usize> {
        let mut drops = vec![0; self.num_experts];
        for (c, s) in self.choices.iter().zip(&self.slots) {
            if s.is_none() {
                drops[*c] += 1;
            }
        }
        drops
    }

    /// Top-K selections per expert before capacity drops.
    pub fn selection_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_experts];
        for &c in &self.choices {
            counts[c] += 1;
        }
        counts
    }

    /// Token assignment ratio `R_e = E / (K·S) · #{j : e ∈ top-K(j)}`.
    pub fn assignment_ratios(&self) -> Vec<f64> {
        let scale = self.num_experts as f64 / (self.top_k * self.num_tokens()) as f64;
        self.selection_counts().iter().map(|&c| c as f64 * scale).collect()
    }
}

/// First-come-first-serve assignment of top-K claims to capacity-limited
/// expert buffers.
pub fn assign_tokens(
    choices: &[usize],
    top_k: usize,
    gate_logits: Tensor,
    gate_probs: Tensor,
    capacity: usize,
    layer_id: usize,
    modality: Modality,
) -> RoutingOutcome {
    let num_experts = gate_probs.last_dim();
    assert_eq!(choices.len(), gate_probs.rows() * top_k, "choices must be [S x K]");
    let mut fill = vec![0usize; num_experts];
    let slots = choices
        .iter()
        .map(|&e| {
            (fill[e] < capacity).then(|| {
                fill[e] += 1;
                fill[e] - 1
            })
        })
        .collect();
    RoutingOutcome {
        layer_id,
        modality,
        num_experts,
        top_k,
        capacity,
        gate_logits,
        gate_probs,
        choices: choices.to_vec(),
        slots,
    }
}

/// Graph handles for one expert MLP.
#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub in_proj: Var,
    pub in_bias: Var,
    pub out_proj: Var,
    pub out_bias: Var,
}

impl ExpertVars {
    /// `gelu(x · W1 + b1) · W2 + b2`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.in_proj)?;
        let h = g.add_broadcast(h, self.in_bias)?;
        let h = g.gelu(h);
        let o = g.matmul(h, self.out_proj)?;
        g.add_broadcast(o, self.out_bias)
    }
}

#[derive(Clone, Debug)]
pub struct MoeVars {
    pub router: Var,
    pub experts: Vec<ExpertVars>,
}

/// Seeded iid noise added to router logits; used to force near-uniform
/// routing in analytics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouterJitter {
    pub seed: u64,
    pub std: f32,
}

/// Per-call routing settings.
#[derive(Clone, Copy, Debug)]
pub struct RouteConfig {
    pub top_k: usize,
    pub capacity_factor: f64,
    pub normalize_after: bool,
    pub layer_id: usize,
    pub modality: Modality,
    pub jitter: Option<RouterJitter>,
}

impl RouteConfig {
    pub fn from_spec(spec: &MoeSpec, layer_id: usize, modality: Modality) -> Self {
        Self {
            top_k: spec.top_k,
            capacity_factor: spec.capacity_factor(modality),
            normalize_after: spec.normalize_gates_after_routing,
            layer_id,
            modality,
            jitter: None,
        }
    }
}

/// Routing record plus the graph nodes the auxiliary losses need.
#[derive(Clone, Debug)]
pub struct LayerRouting {
    pub outcome: RoutingOutcome,
    pub logits: Var,
    pub probs: Var,
}

/// The gated expert sum `Σ g_{e,j} · MLP_e(x_j)` for `x [S × D]`, without
/// the residual.
pub fn moe_mix(g: &mut Graph, x: Var, vars: &MoeVars, cfg: &RouteConfig) -> Result<(Var, LayerRouting)> {
    let (s, d) = dims2(g.value(x))?;
    let e = vars.experts.len();
    let mut logits = g.matmul(x, vars.router)?;
    if let Some(j) = cfg.jitter {
        let seed = j.seed ^ ((cfg.layer_id as u64) << 32) ^ ((cfg.modality as u64) << 48);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f32, j.std).map_err(|e| Error::Contract(e.to_string()))?;
        let noise = g.constant(Tensor::from_fn(&[s, e], |_| dist.sample(&mut rng)));
        logits = g.add(logits, noise)?;
    }
    let probs = g.softmax(logits, 1)?;
    let choices = select_top_k(g.value(probs), cfg.top_k);
    let capacity = expert_capacity(s, e, cfg.capacity_factor);
    let outcome = assign_tokens(
        &choices,
        cfg.top_k,
        g.value(logits).clone(),
        g.value(probs).clone(),
        capacity,
        cfg.layer_id,
        cfg.modality,
    );

    // Surviving assignments grouped by expert, in slot order.
    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); e];
    for (i, (&ex, slot)) in outcome.choices.iter().zip(&outcome.slots).enumerate() {
        if slot.is_some() {
            per_expert[ex].push(i / cfg.top_k);
        }
    }
    let tokens: Vec<usize> = per_expert.iter().flatten().copied().collect();
    if tokens.is_empty() {
        let zeros = g.constant(Tensor::zeros(&[s, d]));
        return Ok((zeros, LayerRouting { outcome, logits, probs }));
    }
    let flat: Vec<usize> = per_expert
        .iter()
        .enumerate()
        .flat_map(|(ex, toks)| toks.iter().map(move |&t| t * e + ex))
        .collect();

    let mut gates = g.gather_elems(probs, &flat)?;
    if cfg.normalize_after {
        let col = g.reshape(gates, &[tokens.len(), 1])?;
        let per_token = g.scatter_add_rows(col, &tokens, s)?;
        let denom = g.gather_rows(per_token, &tokens)?;
        let normed = g.div(col, denom)?;
        gates = g.reshape(normed, &[tokens.len()])?;
    }

    let mut mix: Option<Var> = None;
    let mut offset = 0;
    for (ex, toks) in per_expert.iter().enumerate() {
        if toks.is_empty() {
            continue;
        }
        let xe = g.gather_rows(x, toks)?;
        let ye = vars.experts[ex].forward(g, xe)?;
        let ge = g.gather_elems(gates, &(offset..offset + toks.len()).collect::<Vec<_>>())?;
        offset += toks.len();
        let weighted = g.scale_rows(ye, ge)?;
        let scattered = g.scatter_add_rows(weighted, toks, s)?;
        mix = Some(match mix {
            Some(m) => g.add(m, scattered)?,
            None => scattered,
        });
    }
    let mix = mix.expect("at least one expert has tokens");
    Ok((mix, LayerRouting { outcome, logits, probs }))
}

/// Full MoE layer with residual: `y = x + moe_mix(x)`.
pub fn moe_forward(g: &mut Graph, x: Var, vars: &MoeVars, cfg: &RouteConfig) -> Result<(Var, LayerRouting)> {
    let (mix, routing) = moe_mix(g, x, vars, cfg)?;
    let y = g.add(x, mix)?;
    g.check_finite(y, &format!("{} MoE layer {}", cfg.modality, cfg.layer_id))?;
    Ok((y, routing))
}

/// `α · Σ_e R_e · P_e` evaluated directly on an outcome.
pub fn load_balance_loss(outcome: &RoutingOutcome, alpha: f64) -> Result<f64> {
    let s = outcome.num_tokens();
    if s == 0 {
        return Err(Error::Contract("load balance loss over zero tokens".into()));
    }
    let r = outcome.assignment_ratios();
    let e = outcome.num_experts;
    let mut p = vec![0.0f64; e];
    for j in 0..s {
        for (pe, &v) in p.iter_mut().zip(outcome.gate_probs.row(j)) {
            *pe += v as f64;
        }
    }
    Ok(alpha * r.iter().zip(&p).map(|(r, p)| r * p / s as f64).sum::<f64>())
}

/// `β · mean_j (logsumexp_e logits[j])²` evaluated directly.
pub fn router_z_loss(gate_logits: &Tensor, beta: f64) -> Result<f64> {
    let s = gate_logits.rows();
    if s == 0 {
        return Err(Error::Contract("router z-loss over zero tokens".into()));
    }
    let mut acc = 0.0f64;
    for j in 0..s {
        let row = gate_logits.row(j);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        acc += lse * lse;
    }
    Ok(beta * acc / s as f64)
}

/// Graph form of [`load_balance_loss`]; differentiable through `P_e` only.
pub fn load_balance_loss_var(g: &mut Graph, routing: &LayerRouting, alpha: f64) -> Result<Var> {
    let r: Vec<f32> = routing.outcome.assignment_ratios().iter().map(|&v| v as f32).collect();
    let r = g.constant(Tensor::new(vec![r.len()], r)?);
    let p = g.mean_axis(routing.probs, 0)?;
    let rp = g.mul(p, r)?;
    let s = g.sum(rp);
    Ok(g.scale(s, alpha as f32))
}

/// Graph form of [`router_z_loss`].
pub fn router_z_loss_var(g: &mut Graph, logits: Var, beta: f64) -> Result<Var> {
    let lse = g.logsumexp(logits, 1)?;
    let sq = g.mul(lse, lse)?;
    let m = g.mean(sq);
    Ok(g.scale(m, beta as f32))
}

/// Balance + z-loss, averaged over every MoE layer invocation of both
/// modalities. Zero when there are none.
pub fn total_aux_loss(g: &mut Graph, routings: &[LayerRouting], spec: Option<&MoeSpec>) -> Result<Var> {
    let Some(spec) = spec.filter(|_| !routings.is_empty()) else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let mut total: Option<Var> = None;
    for r in routings {
        let lb = load_balance_loss_var(g, r, spec.balance_weight)?;
        let z = router_z_loss_var(g, r.logits, spec.router_z_weight)?;
        let both = g.add(lb, z)?;
        total = Some(match total {
            Some(t) => g.add(t, both)?,
            None => both,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / routings.len() as f32))
}
