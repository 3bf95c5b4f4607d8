//! Browser bindings for three small views of the library: token routing
//! under a capacity limit, FLOPs of the standard configs, and the learning
//! rate schedule.

use mucp::flops::{flops_estimate, named_config, NAMED_CONFIGS};
use mucp::moe::{assign_tokens, expert_capacity, select_top_k, RoutingOutcome};
use mucp::spec::Modality;
use mucp::train::{lr_schedule, TrainConfig};
use mucp::Tensor;
use wasm_bindgen::prelude::*;

/// A batch of router logits routed to capacity-limited experts.
#[wasm_bindgen]
pub struct RoutingDemo {
    logits: Tensor,
    bias: Vec<f32>,
    top_k: usize,
    capacity_factor: f64,
    outcome: RoutingOutcome,
}

#[wasm_bindgen]
impl RoutingDemo {
    /// `logits` is row-major `[tokens × experts]`.
    #[wasm_bindgen(constructor)]
    pub fn new(logits: Vec<f32>, tokens: usize, experts: usize, top_k: usize, capacity_factor: f64) -> Result<RoutingDemo, String> {
        if tokens == 0 || experts == 0 {
            return Err("need at least one token and one expert".into());
        }
        let logits = Tensor::new(vec![tokens, experts], logits).map_err(|e| e.to_string())?;
        check(top_k, experts, capacity_factor)?;
        let outcome = route(&logits, &vec![0.0; experts], top_k, capacity_factor);
        Ok(RoutingDemo { logits, bias: vec![0.0; experts], top_k, capacity_factor, outcome })
    }

    pub fn set_top_k(&mut self, top_k: usize) -> Result<(), String> {
        check(top_k, self.experts(), self.capacity_factor)?;
        self.top_k = top_k;
        self.reroute();
        Ok(())
    }

    pub fn set_capacity_factor(&mut self, c: f64) -> Result<(), String> {
        check(self.top_k, self.experts(), c)?;
        self.capacity_factor = c;
        self.reroute();
        Ok(())
    }

    /// Adds `b` to every logit of expert `e`.
    pub fn set_expert_bias(&mut self, e: usize, b: f32) -> Result<(), String> {
        let slot = self.bias.get_mut(e).ok_or_else(|| format!("no expert {e}"))?;
        *slot = b;
        self.reroute();
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.logits.rows()
    }

    pub fn experts(&self) -> usize {
        self.logits.last_dim()
    }

    pub fn capacity(&self) -> usize {
        self.outcome.capacity
    }

    /// `[tokens × top_k]` chosen experts.
    pub fn choices(&self) -> Vec<u32> {
        self.outcome.choices.iter().map(|&c| c as u32).collect()
    }

    /// `[tokens × top_k]` flags, 1 where the claim was kept.
    pub fn kept(&self) -> Vec<u8> {
        self.outcome.slots.iter().map(|s| s.is_some() as u8).collect()
    }

    /// `[tokens × experts]` routing probabilities.
    pub fn probs(&self) -> Vec<f32> {
        self.outcome.gate_probs.data().to_vec()
    }

    pub fn expert_load(&self) -> Vec<u32> {
        self.outcome.expert_load().iter().map(|&n| n as u32).collect()
    }

    pub fn expert_drops(&self) -> Vec<u32> {
        self.outcome.expert_drops().iter().map(|&n| n as u32).collect()
    }

    pub fn drop_fraction(&self) -> f64 {
        self.outcome.drop_fraction()
    }

    /// Tokens that lost every one of their claims.
    pub fn fully_dropped(&self) -> usize {
        (0..self.tokens()).filter(|&j| self.outcome.fully_dropped(j)).count()
    }
}

impl RoutingDemo {
    fn reroute(&mut self) {
        self.outcome = route(&self.logits, &self.bias, self.top_k, self.capacity_factor);
    }
}

fn check(top_k: usize, experts: usize, c: f64) -> Result<(), String> {
    if top_k == 0 || top_k > experts {
        return Err(format!("top_k must be in 1..={experts}"));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(format!("capacity factor must be non-negative, got {c}"));
    }
    Ok(())
}

fn route(logits: &Tensor, bias: &[f32], top_k: usize, c: f64) -> RoutingOutcome {
    let (s, e) = (logits.rows(), logits.last_dim());
    let shifted = Tensor::new(vec![s, e], logits.data().iter().enumerate().map(|(i, &v)| v + bias[i % e]).collect())
        .expect("shape preserved");
    let probs = shifted.softmax(1).expect("2-D logits");
    let choices = select_top_k(&probs, top_k);
    assign_tokens(&choices, top_k, shifted, probs, expert_capacity(s, e, c), 0, Modality::Image)
}

/// Names accepted by [`config_gflops`].
#[wasm_bindgen]
pub fn config_names() -> Vec<String> {
    NAMED_CONFIGS.iter().map(|s| s.to_string()).collect()
}

/// Forward GFLOPs per image-text pair: `[image, text, total]`.
#[wasm_bindgen]
pub fn config_gflops(name: &str) -> Result<Vec<f64>, String> {
    let spec = named_config(name).ok_or_else(|| format!("unknown config {name:?}"))?;
    let r = flops_estimate(&spec);
    Ok(vec![r.image_gflops, r.text_gflops, r.total_gflops()])
}

/// Parameter count of a named config.
#[wasm_bindgen]
pub fn config_params(name: &str) -> Result<f64, String> {
    let spec = named_config(name).ok_or_else(|| format!("unknown config {name:?}"))?;
    Ok(flops_estimate(&spec).params as f64)
}

/// Learning rate at every step of a run.
#[wasm_bindgen]
pub fn lr_curve(steps: usize, warmup_steps: usize, peak_lr: f64) -> Result<Vec<f64>, String> {
    let cfg = TrainConfig { steps, warmup_steps, peak_lr, ..TrainConfig::default() };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok((0..steps).map(|s| lr_schedule(s, &cfg)).collect())
}
