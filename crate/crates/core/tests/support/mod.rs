//! Helpers shared by integration tests: random inputs and a central
//! finite-difference gradient checker.
#![allow(dead_code)]

pub mod ops;

use mucp::graph::{Graph, Var};
use mucp::model::{contrastive_loss, encode_batch, Batch, BoundParams, ForwardOptions};
use mucp::moe::{total_aux_loss, LayerRouting};
use mucp::{Checkpoint, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Result of comparing analytic and numeric gradients.
#[derive(Clone, Copy, Debug)]
pub struct FdReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation changed the signature.
    pub skipped: usize,
}

/// Builder of a differentiable expression. Returns the output node and a
/// discrete signature (routing decisions); coordinates whose perturbation
/// changes the signature are not compared.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<(Var, Vec<usize>)> + 'a;

fn weighted_sum(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Checks `d/dx Σ w ⊙ f(x)` for random fixed weights `w`.
pub fn check_gradients(inputs: &[Tensor], seed: u64, h: f32, build: &Build) -> FdReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let (y, sig) = build(&mut g, &vars).expect("forward");
    let w = uniform(&mut rng(seed ^ 0x5eed), g.shape(y), -1.0, 1.0);
    let wv = g.constant(w.clone());
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let eval = |xs: &[Tensor]| -> (f64, Vec<usize>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let (y, sig) = build(&mut g, &vars).expect("forward");
        (weighted_sum(g.value(y), &w), sig)
    };

    let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
    let (mut checked, mut skipped) = (0, 0);
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for k in 0..xs[i].numel() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + h;
            let (fp, sp) = eval(&xs);
            xs[i].data_mut()[k] = orig - h;
            let (fm, sm) = eval(&xs);
            xs[i].data_mut()[k] = orig;
            if sp != sig || sm != sig {
                skipped += 1;
                continue;
            }
            let num = (fp - fm) / (2.0 * h as f64);
            let a = analytic[i].data()[k] as f64;
            diff += (a - num).powi(2);
            an += a * a;
            nn += num * num;
            checked += 1;
        }
    }
    let denom = an.sqrt().max(nn.sqrt()).max(1e-12);
    FdReport { rel_err: diff.sqrt() / denom, checked, skipped }
}

/// Signature of a set of routing decisions.
pub fn routing_signature(routings: &[LayerRouting]) -> Vec<usize> {
    let mut sig = Vec::new();
    for r in routings {
        sig.extend_from_slice(&r.outcome.choices);
        sig.extend(r.outcome.slots.iter().map(|s| s.map_or(usize::MAX, |v| v)));
    }
    sig
}

/// Training loss of `ck` on `batch` and its routing signature.
pub fn model_loss(ck: &Checkpoint, batch: &Batch, opts: &ForwardOptions, trainable: bool) -> (Graph, BoundParams, Var, Vec<usize>) {
    let mut g = Graph::new();
    let bp = BoundParams::bind(&mut g, &ck.params, trainable);
    let (img, txt) = encode_batch(&mut g, &ck.spec, &bp, batch, opts).unwrap();
    let scale = bp.get("logit_scale").unwrap();
    let c = contrastive_loss(&mut g, img.embeddings, txt.embeddings, scale).unwrap();
    let routings: Vec<LayerRouting> = img.routing.into_iter().chain(txt.routing).collect();
    let aux = total_aux_loss(&mut g, &routings, ck.spec.moe.as_ref()).unwrap();
    let total = g.add(c, aux).unwrap();
    (g, bp, total, routing_signature(&routings))
}

/// Finite-difference check of the full training loss with respect to
/// `coords` (parameter name, flat index).
pub fn check_model_gradients(ck: &Checkpoint, batch: &Batch, coords: &[(String, usize)], h: f32) -> FdReport {
    let opts = ForwardOptions::default();
    let (mut g, bp, loss, sig) = model_loss(ck, batch, &opts, true);
    g.backward(loss).unwrap();
    let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
    let (mut checked, mut skipped) = (0, 0);
    let mut probe = ck.clone();
    for (name, k) in coords {
        let a = g.grad_tensor(bp.get(name).unwrap()).data()[*k] as f64;
        let orig = probe.params.get(name).unwrap().data()[*k];
        let mut at = |v: f32| {
            probe.params.get_mut(name).unwrap().data_mut()[*k] = v;
            let (g, _, l, s) = model_loss(&probe, batch, &opts, false);
            (g.value(l).item() as f64, s)
        };
        let (fp, sp) = at(orig + h);
        let (fm, sm) = at(orig - h);
        probe.params.get_mut(name).unwrap().data_mut()[*k] = orig;
        if sp != sig || sm != sig {
            skipped += 1;
            continue;
        }
        let num = (fp - fm) / (2.0 * h as f64);
        diff += (a - num).powi(2);
        an += a * a;
        nn += num * num;
        checked += 1;
    }
    let denom = an.sqrt().max(nn.sqrt()).max(1e-12);
    FdReport { rel_err: diff.sqrt() / denom, checked, skipped }
}
