//! Optimization loop: cosine schedule with linear warmup, AdamW with
//! decoupled weight decay, global-norm clipping, and per-step metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{contrastive_loss, encode_batch, Batch, BoundParams, ForwardOptions};
use crate::moe::{total_aux_loss, LayerRouting};
use crate::params::ParamStore;
use crate::spec::Modality;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Dense,
    SparseScratch,
    Upcycle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub regime: Regime,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Snapshot interval in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            peak_lr: 5e-4,
            warmup_steps: 100,
            weight_decay: 0.2,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            seed: 0,
            regime: Regime::Dense,
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Upcycled fine-tuning defaults: 1,000 steps at a tenth of the learning
    /// rate and a quarter of the weight decay.
    pub fn upcycle_default() -> Self {
        Self { steps: 1000, peak_lr: 5e-5, weight_decay: 0.05, regime: Regime::Upcycle, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("train.steps must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return fail(format!("train.warmup_steps ({}) must be below train.steps ({})", self.warmup_steps, self.steps));
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be positive".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("train.peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (f, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("train.{f} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail("train.adam_eps must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return fail("train.grad_clip must be non-negative".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at `steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, n) = (cfg.warmup_steps, cfg.steps);
    if step < w {
        return cfg.peak_lr * step as f64 / w as f64;
    }
    let progress = ((step - w) as f64 / (n - w) as f64).min(1.0);
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Weight decay applies to matrices only; biases, gains and the logit scale
/// are exempt.
pub fn decays(t: &Tensor) -> bool {
    t.ndim() >= 2
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update:
/// `p ← p·(1 − lr·wd) − lr · m̂ / (√v̂ + ε)` with bias-corrected moments.
/// Parameters without a gradient entry are left untouched.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let eps = cfg.adam_eps as f32;
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        let n = g.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let keep = if decays(p) { (1.0 - lr * cfg.weight_decay) as f32 } else { 1.0 };
        let (lr1, rc2) = ((lr / c1) as f32, (1.0 / c2) as f32);
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1f * *m + (1.0 - b1f) * g;
            *v = b2f * *v + (1.0 - b2f) * g * g;
            *p = *p * keep - lr1 * *m / ((*v * rc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Shuffles example indices once per pass, deterministically in `seed`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(Error::Config(format!("batch size {batch_size} does not fit a dataset of {len}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Self { order, pos: 0, batch_size, rng })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        out
    }
}

/// Worker thread cap from `MUCP_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("MUCP_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n >= 1).unwrap_or(1)
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub total_loss: f64,
    pub contrastive_loss: f64,
    pub aux_loss: f64,
    pub drop_frac_image: f64,
    pub drop_frac_text: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,total_loss,contrastive_loss,aux_loss,drop_frac_image,drop_frac_text,lr";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<StepMetrics>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e}",
                r.step, r.total_loss, r.contrastive_loss, r.aux_loss, r.drop_frac_image, r.drop_frac_text, r.lr
            )
            .expect("write to string");
        }
        s
    }
}

fn drop_fraction(routings: &[LayerRouting], m: Modality) -> f64 {
    let (dropped, total) = routings
        .iter()
        .filter(|r| r.outcome.modality == m)
        .fold((0, 0), |(d, t), r| (d + r.outcome.total_dropped(), t + r.outcome.slots.len()));
    if total == 0 {
        0.0
    } else {
        dropped as f64 / total as f64
    }
}

/// Loss values and gradients of one forward/backward pass.
pub struct StepResult {
    pub contrastive: f64,
    pub aux: f64,
    pub total: f64,
    pub drop_frac_image: f64,
    pub drop_frac_text: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// Forward and backward on one batch.
pub fn loss_and_grads(ck: &Checkpoint, batch: &Batch, opts: &ForwardOptions) -> Result<StepResult> {
    let mut g = Graph::new();
    let bp = BoundParams::bind(&mut g, &ck.params, true);
    let (img, txt) = encode_batch(&mut g, &ck.spec, &bp, batch, opts)?;
    let scale = bp.get("logit_scale")?;
    let c = contrastive_loss(&mut g, img.embeddings, txt.embeddings, scale)?;
    let routings: Vec<LayerRouting> = img.routing.into_iter().chain(txt.routing).collect();
    let aux = total_aux_loss(&mut g, &routings, ck.spec.moe.as_ref())?;
    let total = g.add(c, aux)?;
    let (cv, av, tv) = (g.value(c).item() as f64, g.value(aux).item() as f64, g.value(total).item() as f64);
    if !tv.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss (contrastive {cv}, aux {av})")));
    }
    g.backward(total)?;
    let grads = bp.iter().map(|(n, &v)| (n.clone(), g.grad_tensor(v))).collect();
    Ok(StepResult {
        contrastive: cv,
        aux: av,
        total: tv,
        drop_frac_image: drop_fraction(&routings, Modality::Image),
        drop_frac_text: drop_fraction(&routings, Modality::Text),
        grads,
    })
}

/// Checks that the regime fits the checkpoint.
pub fn check_regime(ck: &Checkpoint, regime: Regime) -> Result<()> {
    let sparse = ck.spec.moe.is_some();
    let ok = match regime {
        Regime::Dense => !sparse,
        Regime::SparseScratch => sparse && !ck.upcycled,
        Regime::Upcycle => sparse && ck.upcycled,
    };
    if ok {
        return Ok(());
    }
    let what = match (sparse, ck.upcycled) {
        (false, _) => "a dense model",
        (true, true) => "an upcycled MoE model",
        (true, false) => "an MoE model trained from scratch",
    };
    Err(Error::Config(format!("regime {regime:?} cannot train {what}")))
}

pub struct RunOutput {
    pub log: MetricsLog,
    pub checkpoint: Checkpoint,
    pub snapshots: Vec<Checkpoint>,
}

pub fn train_run(init: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<RunOutput> {
    train_run_observed(init, data, cfg, |_| {})
}

/// Trains `init` on `data`, calling `observe` after every step.
///
/// With `MUCP_THREADS > 1`, batches are assembled on a producer thread with a
/// queue of two; results do not depend on the thread count.
pub fn train_run_observed(
    init: &Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&StepMetrics),
) -> Result<RunOutput> {
    cfg.validate()?;
    init.validate()?;
    check_regime(init, cfg.regime)?;
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.seed)?;
    let mut ck = init.clone();
    let mut state = AdamState::new();
    let mut log = MetricsLog::default();
    let mut snapshots = Vec::new();
    let opts = ForwardOptions::default();

    let mut step_fn = |s: usize, batch: Batch| -> Result<()> {
        let lr = lr_schedule(s, cfg);
        let tag = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {s}: {m}")),
            other => other,
        };
        let mut r = loss_and_grads(&ck, &batch, &opts).map_err(tag)?;
        clip_global_norm(&mut r.grads, cfg.grad_clip);
        adamw_step(&mut ck.params, &r.grads, &mut state, lr, cfg)?;
        ck.step += 1;
        let row = StepMetrics {
            step: s as u64,
            total_loss: r.total,
            contrastive_loss: r.contrastive,
            aux_loss: r.aux,
            drop_frac_image: r.drop_frac_image,
            drop_frac_text: r.drop_frac_text,
            lr,
        };
        observe(&row);
        log.rows.push(row);
        if cfg.checkpoint_every > 0 && (s + 1) % cfg.checkpoint_every == 0 && s + 1 < cfg.steps {
            snapshots.push(ck.clone());
        }
        Ok(())
    };

    if worker_threads() > 1 {
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(2);
            let steps = cfg.steps;
            scope.spawn(move || {
                for _ in 0..steps {
                    if tx.send(data.batch(&sampler.next_indices())).is_err() {
                        break;
                    }
                }
            });
            for s in 0..cfg.steps {
                let batch = rx.recv().map_err(|_| Error::Contract("batch producer stopped".into()))??;
                step_fn(s, batch)?;
            }
            Ok(())
        })?;
    } else {
        for s in 0..cfg.steps {
            let batch = data.batch(&sampler.next_indices())?;
            step_fn(s, batch)?;
        }
    }
    Ok(RunOutput { log, checkpoint: ck, snapshots })
}
