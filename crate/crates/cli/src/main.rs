use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mucp::analytics::{collect_router_trace, render_drop_map};
use mucp::config::data_fits_model;
use mucp::data::make_synth_dataset;
use mucp::eval::evaluate;
use mucp::flops::{cost_csv, flops_estimate, named_config, CostReport, NAMED_CONFIGS};
use mucp::model::ForwardOptions;
use mucp::spec::{Modality, MoeModality, MoeSpec};
use mucp::train::{train_run_observed, worker_threads, Regime, RunOutput, StepMetrics, TrainConfig};
use mucp::upcycle::{upcycle_checkpoint, verify_equivalence};
use mucp::{Checkpoint, Error, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mucp", version, about = "Sparse-upcycled mixture-of-experts dual encoders at desk scale")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "F")]
    capacity_image: Option<f64>,
    #[arg(long, global = true, value_name = "F")]
    capacity_text: Option<f64>,
    /// Renormalize surviving gates after routing.
    #[arg(long, global = true, value_name = "on|off")]
    normalize_after: Option<Switch>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Image,
    Text,
    Both,
}

impl From<ModalityArg> for MoeModality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Image => MoeModality::Image,
            ModalityArg::Text => MoeModality::Text,
            ModalityArg::Both => MoeModality::Both,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense model from scratch.
    TrainDense,
    /// Convert a dense checkpoint into an MoE checkpoint.
    Upcycle {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Towers that receive MoE layers (default: `model.moe_modality`).
        #[arg(long)]
        modality: Option<ModalityArg>,
        /// Check that the upcycled model reproduces the dense embeddings.
        #[arg(long)]
        verify: bool,
    },
    /// Train an MoE model: from scratch, or continue an upcycled checkpoint.
    TrainSparse {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Retrieval and zero-shot accuracy on the validation split.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Inference cost. `--config` takes a named config (see --list) or a
    /// config file; all named configs are reported without it.
    Flops {
        #[arg(long)]
        list: bool,
    },
    /// Router trace CSV over the validation split and drop maps for a few images.
    AnalyzeRouter {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Number of validation images to render drop maps for.
        #[arg(long, default_value_t = 4)]
        images: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::Verification(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> mucp::Result<()> {
    if let Command::Flops { list } = &cli.command {
        return flops(cli, *list);
    }
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.finetune.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    apply_moe_overrides(cli, &mut cfg.moe)?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;

    match &cli.command {
        Command::TrainDense => {
            let init = Checkpoint::fresh(cfg.dense_spec(), cfg.train.seed)?;
            let tc = TrainConfig { regime: Regime::Dense, ..cfg.train.clone() };
            train(&cfg, &init, &tc, &out, "dense")
        }
        Command::Upcycle { checkpoint, modality, verify } => {
            let dense = load(checkpoint)?;
            let modality = modality.map_or(cfg.model.moe_modality, MoeModality::from);
            let (sparse, report) = upcycle_checkpoint(&dense, &cfg.moe, modality, cfg.finetune.seed)?;
            let text = report.to_text();
            println!("{text}");
            fs::write(out.join("surgery_report.json"), format!("{text}\n"))?;
            if *verify {
                data_fits_model(&cfg.data, &dense.spec)?;
                let (_, val) = make_synth_dataset(&cfg.data)?;
                let dev = verify_equivalence(&dense, &sparse, &val.full_batch()?)?;
                println!("max deviation: {dev:.3e}");
                if dev >= 1e-5 {
                    return Err(Error::Verification(format!("max deviation {dev:.3e} exceeds 1e-5")));
                }
            }
            let path = out.join("upcycled.mucp");
            sparse.save(&path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::TrainSparse { checkpoint } => match checkpoint {
            Some(p) => {
                let mut init = load(p)?;
                override_checkpoint_moe(cli, &mut init)?;
                let tc = TrainConfig { regime: Regime::Upcycle, ..cfg.finetune.clone() };
                train(&cfg, &init, &tc, &out, "upcycled")
            }
            None => {
                let init = Checkpoint::fresh(cfg.sparse_spec(), cfg.train.seed)?;
                let tc = TrainConfig { regime: Regime::SparseScratch, ..cfg.train.clone() };
                train(&cfg, &init, &tc, &out, "sparse")
            }
        },
        Command::Eval { checkpoint } => {
            let mut ck = load(checkpoint)?;
            override_checkpoint_moe(cli, &mut ck)?;
            data_fits_model(&cfg.data, &ck.spec)?;
            let (_, val) = make_synth_dataset(&cfg.data)?;
            let report = evaluate(&ck.spec, &ck.params, &val)?;
            let text = format!("{}\nchance recall@1: {:.4}\n", report.to_text(), 1.0 / report.pairs as f64);
            print!("{text}");
            fs::write(out.join("eval.txt"), text)?;
            Ok(())
        }
        Command::AnalyzeRouter { checkpoint, images } => {
            let mut ck = load(checkpoint)?;
            override_checkpoint_moe(cli, &mut ck)?;
            data_fits_model(&cfg.data, &ck.spec)?;
            let (_, val) = make_synth_dataset(&cfg.data)?;
            let opts = ForwardOptions::default();
            let batch = cfg.train.batch_size.min(val.len());
            let trace = collect_router_trace(&ck.spec, &ck.params, &val, batch, &opts, worker_threads())?;
            let path = out.join("router_trace.csv");
            fs::write(&path, trace.to_csv())?;
            println!("wrote {} ({} layers, conservation holds)", path.display(), trace.layers.len());
            let layers = ck.spec.moe_layers(ck.spec.trunk(Modality::Image));
            for i in 0..(*images).min(val.len()) {
                let image = val.image(i)?;
                for &l in &layers {
                    let (map, _) = render_drop_map(&ck.spec, &ck.params, &image, l, &opts)?;
                    let stem = format!("dropmap_image{i}_layer{l}");
                    map.write(&image, ck.spec.patch_size, &out, &stem)?;
                    println!("{stem}: {} of {} patches dropped", map.dropped_cells(), map.cells.len());
                }
            }
            Ok(())
        }
        Command::Flops { .. } => unreachable!("handled above"),
    }
}

fn load(path: &Path) -> mucp::Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint `{}` does not exist", path.display())));
    }
    Checkpoint::load(path)
}

fn apply_moe_overrides(cli: &Cli, moe: &mut MoeSpec) -> mucp::Result<()> {
    if let Some(c) = cli.capacity_image {
        moe.capacity_factor_image = c;
    }
    if let Some(c) = cli.capacity_text {
        moe.capacity_factor_text = c;
    }
    if let Some(n) = cli.normalize_after {
        moe.normalize_gates_after_routing = matches!(n, Switch::On);
    }
    moe.validate()
}

/// Routing flags also apply to MoE settings stored in a checkpoint.
fn override_checkpoint_moe(cli: &Cli, ck: &mut Checkpoint) -> mucp::Result<()> {
    match ck.spec.moe.as_mut() {
        Some(moe) => apply_moe_overrides(cli, moe),
        None => Ok(()),
    }
}

fn train(cfg: &ExperimentConfig, init: &Checkpoint, tc: &TrainConfig, out: &Path, name: &str) -> mucp::Result<()> {
    data_fits_model(&cfg.data, &init.spec)?;
    let (train, val) = make_synth_dataset(&cfg.data)?;
    let every = (tc.steps / 10).max(1);
    let progress = |m: &StepMetrics| {
        if (m.step as usize + 1) % every == 0 {
            eprintln!(
                "step {:>6}  loss {:.4}  contrastive {:.4}  aux {:.4}  drop img {:.3} txt {:.3}  lr {:.2e}",
                m.step + 1,
                m.total_loss,
                m.contrastive_loss,
                m.aux_loss,
                m.drop_frac_image,
                m.drop_frac_text,
                m.lr
            );
        }
    };
    let RunOutput { log, checkpoint, snapshots } = train_run_observed(init, &train, tc, progress)?;
    fs::write(out.join(format!("{name}_metrics.csv")), log.to_csv())?;
    for s in &snapshots {
        s.save(&out.join(format!("{name}_step{}.mucp", s.step)))?;
    }
    let path = out.join(format!("{name}_final.mucp"));
    checkpoint.save(&path)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let report = evaluate(&checkpoint.spec, &checkpoint.params, &val)?;
    println!("wrote {}", path.display());
    println!("{}", report.to_text());
    Ok(())
}

fn flops(cli: &Cli, list: bool) -> mucp::Result<()> {
    if list {
        NAMED_CONFIGS.iter().for_each(|n| println!("{n}"));
        return Ok(());
    }
    let named = |n: &str| {
        named_config(n)
            .map(|s| CostReport { config: n.to_string(), ..flops_estimate(&s) })
            .ok_or_else(|| Error::Config(format!("unknown model `{n}`; known: {}", NAMED_CONFIGS.join(", "))))
    };
    let name = cli.config.as_ref().and_then(|p| p.to_str()).filter(|n| named_config(n).is_some());
    let (reports, out) = match (name, &cli.config) {
        (Some(n), _) => (vec![named(n)?], cli.out.clone()),
        (None, Some(p)) => {
            let mut cfg = ExperimentConfig::load(p)?;
            apply_moe_overrides(cli, &mut cfg.moe)?;
            let reports = vec![
                CostReport { config: "config-dense".into(), ..flops_estimate(&cfg.dense_spec()) },
                CostReport { config: "config-sparse".into(), ..flops_estimate(&cfg.sparse_spec()) },
            ];
            (reports, Some(cli.out.clone().unwrap_or(cfg.output_dir)))
        }
        (None, None) => (NAMED_CONFIGS.iter().map(|n| named(n)).collect::<mucp::Result<_>>()?, cli.out.clone()),
    };
    let csv = cost_csv(&reports);
    print!("{csv}");
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("costs.csv"), csv)?;
    }
    Ok(())
}
