//! Acceptance criteria 1 to 9. Prints one line per criterion (plus detail
//! lines) and exits non-zero when a criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- 1 4 5`.

mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use mucp::analytics::{collect_router_trace, render_drop_map};
use mucp::data::{make_synth_dataset, Dataset, SynthSpec};
use mucp::eval::{evaluate, EvalReport};
use mucp::flops::{flops_estimate, named_config};
use mucp::model::ForwardOptions;
use mucp::moe::{assign_tokens, compute_gates, expert_capacity, load_balance_loss, router_z_loss, RouterJitter};
use mucp::params::normal_tensor;
use mucp::spec::{BackboneMode, Modality, ModelSpec, MoeModality, MoeSpec};
use mucp::train::{train_run, MetricsLog, Regime, TrainConfig, METRICS_HEADER};
use mucp::upcycle::{upcycle_checkpoint, verify_equivalence};
use mucp::{Checkpoint, ExperimentConfig, Tensor};
use support::ops::op_cases;
use support::{check_model_gradients, rng, uniform};

/// Sub-checks whose failure is reported but does not fail the run.
const ALLOWED_TO_FAIL: &[&str] = &["6b", "6c"];

struct Check {
    id: String,
    pass: bool,
    detail: String,
}

fn check(id: impl Into<String>, pass: bool, detail: impl Into<String>) -> Check {
    Check { id: id.into(), pass, detail: detail.into() }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Vec<Check>); 9] = [
        (1, "FLOPs reproduction", criterion_1),
        (2, "upcycle forward equivalence", criterion_2),
        (3, "gradient integrity", criterion_3),
        (4, "auxiliary-loss closed forms", criterion_4),
        (5, "capacity and dropping laws", criterion_5),
        (6, "desk-scale training pipeline", criterion_6),
        (7, "recipe grid smoke", criterion_7),
        (8, "router analytics", criterion_8),
        (9, "reproducibility", criterion_9),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = false;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let checks = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            vec![check(n.to_string(), false, format!("panicked: {msg}"))]
        });
        let pass = checks.iter().all(|c| c.pass);
        println!("criterion {n}: {} {name} ({:.1}s)", if pass { "PASS" } else { "FAIL" }, t0.elapsed().as_secs_f64());
        for c in &checks {
            let tag = match (c.pass, ALLOWED_TO_FAIL.contains(&c.id.as_str())) {
                (true, _) => "pass",
                (false, true) => "FAIL (allowed)",
                (false, false) => "FAIL",
            };
            println!("    [{}] {tag}: {}", c.id, c.detail);
            failed |= !c.pass && !ALLOWED_TO_FAIL.contains(&c.id.as_str());
        }
    }
    if failed {
        std::process::exit(1);
    }
}

fn within(x: f64, target: f64, rel: f64) -> bool {
    (x - target).abs() <= rel * target
}

fn criterion_1() -> Vec<Check> {
    let total = |n: &str| flops_estimate(&named_config(n).unwrap()).total_gflops();
    let mut out = Vec::new();
    for (n, target) in [
        ("b32-dense", 14.8),
        ("b16-dense", 41.2),
        ("l14-dense", 175.5),
        ("b32-up", 19.6),
        ("b16-up", 54.3),
        ("l14-up", 231.7),
    ] {
        let v = total(n);
        out.push(check(format!("1.{n}"), within(v, target, 0.10), format!("{n}: {v:.2} GFLOPs vs {target} (±10%)")));
    }
    for (a, b, target) in [("b32-up", "b16-dense", 0.476), ("b16-up", "l14-dense", 0.309)] {
        let r = total(a) / total(b);
        out.push(check(format!("1.{a}/{b}"), (r - target).abs() <= 0.03, format!("{a} / {b} = {r:.3} vs {target} (±0.03)")));
    }
    out
}

fn criterion_2() -> Vec<Check> {
    let (_, val) = make_synth_dataset(&SynthSpec::default()).unwrap();
    let batch = val.full_batch().unwrap();
    let mut worst = 0.0f32;
    for seed in 0..20u64 {
        // Shared trunks serve both towers, so only separated ones vary the modality.
        let (mode, modality) = match seed % 4 {
            0 => (BackboneMode::Shared, MoeModality::Both),
            1 => (BackboneMode::Separated, MoeModality::Both),
            2 => (BackboneMode::Separated, MoeModality::Image),
            _ => (BackboneMode::Separated, MoeModality::Text),
        };
        let spec = ModelSpec { backbone_mode: mode, ..ModelSpec::tiny() };
        let dense = Checkpoint::fresh(spec, seed).unwrap();
        let (sparse, report) = upcycle_checkpoint(&dense, &MoeSpec::default(), modality, seed).unwrap();
        assert!(report.identity_holds());
        worst = worst.max(verify_equivalence(&dense, &sparse, &batch).unwrap());
    }
    vec![check("2", worst < 1e-5, format!("max abs deviation over 20 models: {worst:.2e} (< 1e-5)"))]
}

fn criterion_3() -> Vec<Check> {
    let mut worst_op = (0.0f64, "");
    for seed in 0..10 {
        for case in op_cases(seed) {
            let r = case.run(seed);
            assert!(r.checked > 0, "{}: no tie-free coordinate", case.name);
            if r.rel_err > worst_op.0 {
                worst_op = (r.rel_err, case.name);
            }
        }
    }
    let n_ops = op_cases(0).len();
    let (train, _) = make_synth_dataset(&SynthSpec { train_size: 64, ..SynthSpec::default() }).unwrap();
    let batch = train.batch(&[0, 1, 2, 3]).unwrap();
    let (mut worst_e2e, mut checked) = (0.0f64, 0);
    for seed in 0..10u64 {
        let spec = ModelSpec::tiny().with_moe(MoeSpec::default(), MoeModality::Both);
        let mut ck = Checkpoint::fresh(spec, seed).unwrap();
        let mut r = rng(seed ^ 0x7007);
        let routers: Vec<String> = ck.params.names().filter(|n| n.ends_with("router")).cloned().collect();
        for n in routers {
            let shape = ck.params.get(&n).unwrap().shape().to_vec();
            ck.params.insert(n, normal_tensor(&shape, 1.0, &mut r));
        }
        let names: Vec<String> = ck.params.names().cloned().collect();
        let coords: Vec<(String, usize)> = (0..24)
            .map(|_| {
                use rand::Rng;
                let n = &names[r.random_range(0..names.len())];
                (n.clone(), r.random_range(0..ck.params.get(n).unwrap().numel()))
            })
            .collect();
        let rep = check_model_gradients(&ck, &batch, &coords, 1e-2);
        worst_e2e = worst_e2e.max(rep.rel_err);
        checked += rep.checked;
    }
    vec![
        check(
            "3.ops",
            worst_op.0 < 1e-3,
            format!("{n_ops} op cases x 10 seeds: worst relative error {:.2e} ({}) (< 1e-3)", worst_op.0, worst_op.1),
        ),
        check(
            "3.end-to-end",
            worst_e2e < 1e-2 && checked >= 120,
            format!("loss through MoE routing, 10 seeds, {checked} tie-free coordinates: worst {worst_e2e:.2e} (< 1e-2)"),
        ),
    ]
}

fn criterion_4() -> Vec<Check> {
    let (e, k, s, alpha, beta) = (8usize, 2usize, 1024usize, 0.01, 0.001);
    let uniform_probs = Tensor::full(&[s, e], 1.0 / e as f32);
    let choices: Vec<usize> = (0..s * k).map(|i| i % e).collect();
    let o = assign_tokens(&choices, k, Tensor::zeros(&[s, e]), uniform_probs, s, 1, Modality::Image);
    let lb_uniform = load_balance_loss(&o, alpha).unwrap();

    let saturated = Tensor::from_fn(&[s, e], |i| if i % e == 0 { 1.0 } else { 0.0 });
    let o = assign_tokens(&vec![0; s], 1, Tensor::zeros(&[s, e]), saturated, s, 1, Modality::Image);
    let lb_collapsed = load_balance_loss(&o, alpha).unwrap();

    let z = router_z_loss(&Tensor::zeros(&[s, e]), beta).unwrap();
    let z_target = beta * (e as f64).ln().powi(2);
    vec![
        check("4.uniform", (lb_uniform - alpha).abs() <= 1e-12, format!("uniform balance loss {lb_uniform:.9} vs α = {alpha}")),
        check(
            "4.collapsed",
            within(lb_collapsed, alpha * e as f64, 0.01),
            format!("collapsed balance loss {lb_collapsed:.6} vs α·E = {}", alpha * e as f64),
        ),
        check("4.z-loss", (z - z_target).abs() <= 1e-6, format!("zero-logit z-loss {z:.9} vs β(ln E)² = {z_target:.9}")),
    ]
}

/// Tokens whose every top-K claim was dropped, read straight off the slots.
fn fully_dropped_tokens(o: &mucp::moe::RoutingOutcome) -> Vec<bool> {
    o.slots.chunks(o.top_k).map(|c| c.iter().all(Option::is_none)).collect()
}

fn criterion_5() -> Vec<Check> {
    let factors = [0.25, 0.5, 1.0, 2.0, 4.0];
    let (s, d, e, k) = (256, 16, 8, 2);
    let (mut monotone, mut identity) = (true, true);
    let mut totals = vec![0usize; factors.len()];
    for b in 0..50u64 {
        let mut r = rng(1000 + b);
        let x = uniform(&mut r, &[s, d], -1.0, 1.0);
        let router = normal_tensor(&[d, e], 1.0, &mut r);
        let (logits, probs, top) = compute_gates(&x, &router, k).unwrap();
        let mut prev = usize::MAX;
        for (i, &c) in factors.iter().enumerate() {
            let o = assign_tokens(&top, k, logits.clone(), probs.clone(), expert_capacity(s, e, c), 1, Modality::Image);
            let drops = o.total_dropped();
            monotone &= drops <= prev;
            prev = drops;
            totals[i] += drops;
            let kept: usize = o.expert_load().iter().sum();
            identity &= kept + o.expert_drops().iter().sum::<usize>() == s * k && kept + drops == s * k;
        }
    }

    let spec = ModelSpec::tiny().with_moe(MoeSpec::default(), MoeModality::Both);
    let mut ck = Checkpoint::fresh(spec, 5).unwrap();
    let mut r = rng(55);
    let router = mucp::params::router_name(mucp::spec::Trunk::Image, 1);
    let shape = ck.params.get(&router).unwrap().shape().to_vec();
    ck.params.insert(router, normal_tensor(&shape, 1.0, &mut r));
    let (_, val) = make_synth_dataset(&SynthSpec::default()).unwrap();
    let (mut maps, mut map_match, mut dropped_cells) = (0, true, 0);
    for i in 0..8 {
        let image = val.image(i).unwrap();
        for c in factors {
            let opts = ForwardOptions { capacity_factor: Some(c), ..ForwardOptions::default() };
            let (map, o) = render_drop_map(&ck.spec, &ck.params, &image, 1, &opts).unwrap();
            let full = fully_dropped_tokens(&o);
            let expected = full[1..].iter().filter(|&&f| f).count();
            map_match &= map.dropped_cells() == expected && map.class_token_dropped == full[0];
            map_match &= map.cells.iter().zip(&full[1..]).all(|(a, b)| a == b);
            dropped_cells += map.dropped_cells();
            maps += 1;
        }
    }
    vec![
        check("5.monotone", monotone, format!("drops over 50 batches at C = {factors:?}: {totals:?}")),
        check("5.identity", identity, "Σ assignments + drops = S·K on every batch and factor"),
        check("5.dropmap", map_match, format!("{maps} drop maps ({dropped_cells} dropped cells) match routing counters")),
    ]
}

fn recall1(r: &EvalReport) -> f64 {
    (r.i2t_r1 + r.t2i_r1) / 2.0
}

fn criterion_6() -> Vec<Check> {
    let cfg = ExperimentConfig::default();
    let (train, val) = make_synth_dataset(&cfg.data).unwrap();
    let chance = 1.0 / val.len() as f64;
    // Post-routing gate normalization for both sparse regimes.
    let moe = MoeSpec { normalize_gates_after_routing: true, ..cfg.moe.clone() };
    let run = |init: &Checkpoint, tc: TrainConfig| train_run(init, &train, &tc).unwrap().checkpoint;
    let eval = |ck: &Checkpoint| evaluate(&ck.spec, &ck.params, &val).unwrap();

    let (mut dense_ok, mut wins, mut up_mean, mut scratch_mean) = (true, 0, 0.0, 0.0);
    let mut lines = Vec::new();
    for seed in [0u64, 1, 2] {
        let dense_cfg = TrainConfig { seed, regime: Regime::Dense, ..cfg.train.clone() };
        let dense = run(&Checkpoint::fresh(cfg.dense_spec(), seed).unwrap(), dense_cfg);
        let rd = eval(&dense);
        dense_ok &= rd.i2t_r1.min(rd.t2i_r1) >= 5.0 * chance;

        let base = run(&dense, TrainConfig { seed, regime: Regime::Dense, ..cfg.finetune.clone() });
        let rb = eval(&base);

        let (up, _) = upcycle_checkpoint(&dense, &moe, cfg.model.moe_modality, seed).unwrap();
        let r0 = eval(&up);
        let up = run(&up, TrainConfig { seed, regime: Regime::Upcycle, ..cfg.finetune.clone() });
        let ru = eval(&up);
        wins += usize::from(ru.t2i_r1 >= rb.t2i_r1);

        let sparse_spec = cfg.model.clone().with_moe(moe.clone(), cfg.model.moe_modality);
        let steps = cfg.train.steps + cfg.finetune.steps;
        let scratch_cfg = TrainConfig { seed, steps, regime: Regime::SparseScratch, ..cfg.train.clone() };
        let rs = eval(&run(&Checkpoint::fresh(sparse_spec, seed).unwrap(), scratch_cfg));

        up_mean += recall1(&ru) / 3.0;
        scratch_mean += recall1(&rs) / 3.0;
        lines.push(format!(
            "seed {seed}: t2i/i2t R@1 dense {:.3}/{:.3}, dense+ft {:.3}/{:.3}, upcycled@0 {:.3}/{:.3}, \
             upcycled {:.3}/{:.3}, scratch {:.3}/{:.3}",
            rd.t2i_r1, rd.i2t_r1, rb.t2i_r1, rb.i2t_r1, r0.t2i_r1, r0.i2t_r1, ru.t2i_r1, ru.i2t_r1, rs.t2i_r1, rs.i2t_r1
        ));
    }
    let mut out = vec![check("6.runs", true, lines.join("; "))];
    out.push(check("6a", dense_ok, format!("dense recall@1 >= 5x chance ({:.3}) on every seed", 5.0 * chance)));
    out.push(check("6b", wins >= 2, format!("upcycled T2I R@1 >= dense baseline on {wins} of 3 seeds (need 2)")));
    out.push(check(
        "6c",
        scratch_mean <= up_mean + 0.02,
        format!("mean R@1 scratch {scratch_mean:.3} vs upcycled {up_mean:.3} (+0.02 allowed)"),
    ));
    out
}

fn log_complete(log: &MetricsLog, steps: usize) -> bool {
    let csv = log.to_csv();
    log.rows.len() == steps
        && log.rows.iter().enumerate().all(|(i, r)| {
            r.step == i as u64
                && [r.total_loss, r.contrastive_loss, r.aux_loss, r.drop_frac_image, r.drop_frac_text, r.lr]
                    .iter()
                    .all(|v| v.is_finite())
        })
        && csv.lines().count() == steps + 1
        && csv.starts_with(METRICS_HEADER)
}

fn criterion_7() -> Vec<Check> {
    let mut out = Vec::new();
    let data = SynthSpec::default();
    let (train, _) = make_synth_dataset(&data).unwrap();
    let short = |regime| TrainConfig { steps: 200, warmup_steps: 20, regime, ..TrainConfig::default() };
    for mode in [BackboneMode::Shared, BackboneMode::Separated] {
        let dense_spec = ModelSpec { backbone_mode: mode, ..ModelSpec::tiny() };
        let sparse_spec = dense_spec.clone().with_moe(MoeSpec::default(), MoeModality::Both);
        let name = format!("{mode:?}").to_lowercase();

        let scratch = train_run(&Checkpoint::fresh(sparse_spec, 0).unwrap(), &train, &short(Regime::SparseScratch));
        let ok = scratch.as_ref().is_ok_and(|r| log_complete(&r.log, 200));
        out.push(check(format!("7.{name}.scratch"), ok, format!("{name} scratch: {}", status(&scratch))));

        let dense = train_run(&Checkpoint::fresh(dense_spec, 0).unwrap(), &train, &short(Regime::Dense)).unwrap();
        let (up, _) = upcycle_checkpoint(&dense.checkpoint, &MoeSpec::default(), MoeModality::Both, 0).unwrap();
        let tuned = train_run(&up, &train, &TrainConfig { steps: 200, warmup_steps: 20, ..TrainConfig::upcycle_default() });
        let ok = tuned.as_ref().is_ok_and(|r| log_complete(&r.log, 200));
        out.push(check(format!("7.{name}.upcycle"), ok, format!("{name} upcycle: {}", status(&tuned))));
    }
    out
}

fn status(r: &mucp::Result<mucp::train::RunOutput>) -> String {
    match r {
        Ok(o) => format!("200 steps, final loss {:.4}", o.log.rows.last().map_or(f64::NAN, |m| m.total_loss)),
        Err(e) => e.to_string(),
    }
}

fn criterion_8() -> Vec<Check> {
    let spec = ModelSpec::tiny().with_moe(MoeSpec::default(), MoeModality::Both);
    let mut ck = Checkpoint::fresh(spec, 8).unwrap();
    let routers: Vec<String> = ck.params.names().filter(|n| n.ends_with("router")).cloned().collect();
    for n in routers {
        let shape = ck.params.get(&n).unwrap().shape().to_vec();
        ck.params.insert(n, Tensor::zeros(&shape));
    }
    let (train, _): (Dataset, Dataset) = make_synth_dataset(&SynthSpec::default()).unwrap();
    let opts = ForwardOptions { jitter: Some(RouterJitter { seed: 8, std: 1.0 }), ..ForwardOptions::default() };
    let trace = collect_router_trace(&ck.spec, &ck.params, &train, 64, &opts, mucp::train::worker_threads()).unwrap();
    let e = 8;
    let mut worst = 0.0f64;
    let mut min_tokens = u64::MAX;
    for st in trace.layers.values() {
        min_tokens = min_tokens.min(st.tokens);
        for x in 0..e {
            let r = mucp::analytics::RouterTrace::assign_ratio(st, trace.top_k, x);
            worst = worst.max((r - 1.0 / e as f64).abs());
        }
    }
    let conserved = trace.check_conservation().is_ok();
    let csv = trace.to_csv();
    let mut csv_ok = csv.lines().count() == 1 + trace.layers.len() * e;
    for l in csv.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        let key = (if f[0] == "image" { Modality::Image } else { Modality::Text }, f[1].parse::<usize>().unwrap());
        let st = &trace.layers[&key];
        let x: usize = f[2].parse().unwrap();
        csv_ok &= f[3].parse::<u64>().unwrap() == st.assign[x] && f[4].parse::<u64>().unwrap() == st.drops[x];
    }
    vec![
        check(
            "8.balance",
            worst <= 0.05 && min_tokens >= 10_000,
            format!("{} layers, >= {min_tokens} tokens each: max |ratio - 1/E| = {worst:.4} (<= 0.05)", trace.layers.len()),
        ),
        check("8.conservation", conserved && csv_ok, "trace CSV rows satisfy assign + drop = tokens·K exactly"),
    ]
}

fn criterion_9() -> Vec<Check> {
    let (train, _) = make_synth_dataset(&SynthSpec::default()).unwrap();
    let mut out = Vec::new();
    for (name, spec, regime) in [
        ("dense", ModelSpec::tiny(), Regime::Dense),
        ("sparse", ModelSpec::tiny().with_moe(MoeSpec::default(), MoeModality::Both), Regime::SparseScratch),
    ] {
        let cfg = TrainConfig { steps: 30, warmup_steps: 5, seed: 9, regime, ..TrainConfig::default() };
        let a = train_run(&Checkpoint::fresh(spec.clone(), 9).unwrap(), &train, &cfg).unwrap();
        let b = train_run(&Checkpoint::fresh(spec, 9).unwrap(), &train, &cfg).unwrap();
        let same_log = a.log.to_csv() == b.log.to_csv();
        let same_ck = a.checkpoint.to_bytes().unwrap() == b.checkpoint.to_bytes().unwrap();
        out.push(check(format!("9.{name}"), same_log && same_ck, format!("{name}: repeated run gives identical log and checkpoint")));

        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.mucp"), dir.path().join("b.mucp"));
        a.checkpoint.save(&p1).unwrap();
        Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
        let same_file = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
        out.push(check(format!("9.{name}.roundtrip"), same_file, format!("{name}: save -> load -> save is byte-identical")));
    }
    out
}
