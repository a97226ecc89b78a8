// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sfseg::data::load_dataset;
use sfseg::experiment::{experiment_csv, run_seed, sweep, CommandConfig};
use sfseg::metrics::evaluate_dataset;
use sfseg::net::SegModelCheckpoint;
use sfseg::synth::generate_dataset;
use sfseg::train::{adapt, pretrain_source, Ablation};
use sfseg::{viz, Error, Result};

#[derive(Parser)]
#[command(name = "sfseg", version, about = "Source-free domain adaptation for binary segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config ({"synth": {...}, "train": {...}}); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Overrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoFcl,
    NoCcpl,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoFcl => Ablation::NoFcl,
            AblationArg::NoCcpl => Ablation::NoCcpl,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain benchmark.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Supervised pre-training on the source splits.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        source_epochs: Option<usize>,
        #[arg(long)]
        source_lr0: Option<f64>,
    },
    /// Source-free adaptation on unlabeled target images.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        source_ckpt: PathBuf,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        /// Labelled split scored after each epoch, for logging only.
        #[arg(long)]
        monitor_split: Option<String>,
    },
    /// Score a checkpoint on a labelled split.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "target_test")]
        split: String,
    },
    /// Adapt over a β × γ grid and plot target-test Dice.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        source_ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 1.5])]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 1.5])]
        gammas: Vec<f64>,
        /// Grid points run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Export foreground heat maps and entropy maps.
    Visualize {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "target_test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Generate, pre-train and adapt with every ablation for each seed.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
}

fn fresh_dir(out: &Path) -> Result<()> {
    if out.exists() {
        let mut entries = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} is not empty",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn load_config(common: &Common) -> Result<CommandConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => CommandConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn apply(cfg: &mut CommandConfig, o: &Overrides) {
    let t = &mut cfg.train;
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.beta {
        t.beta = v;
    }
    if let Some(v) = o.gamma {
        t.gamma = v;
    }
    if let Some(v) = o.lr0 {
        t.lr0 = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
}

/// Validates the resolved config, claims the output directory and echoes
/// the config into it.
fn start(cfg: &CommandConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fresh_dir(out)?;
    let path = out.join("resolved_config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { common, image_size } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = image_size {
                cfg.synth.image_size = s;
            }
            start(&cfg, &common.out)?;
            let summary = generate_dataset(&cfg.synth, &common.out)?;
            for s in &summary.splits {
                println!(
                    "{:<13} {:>5} images, mean foreground {:.3}",
                    s.split, s.count, s.mean_foreground_fraction
                );
            }
        }
        Command::Pretrain {
            common,
            data,
            source_epochs,
            source_lr0,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = source_epochs {
                cfg.train.source_epochs = v;
            }
            if let Some(v) = source_lr0 {
                cfg.train.source_lr0 = v;
            }
            start(&cfg, &common.out)?;
            let train = load_dataset(&data, "source_train")?;
            let val = load_dataset(&data, "source_val")?;
            let (_, record) = pretrain_source(&train, &val, &cfg.train, Some(&common.out))?;
            let best = record
                .epochs
                .iter()
                .filter_map(|e| e.eval.as_ref().map(|m| m.dice))
                .fold(f64::NAN, f64::max);
            println!(
                "wrote {} (best source-val Dice {best:.4})",
                common.out.join("model.ckpt").display()
            );
        }
        Command::Adapt {
            common,
            overrides,
            data,
            source_ckpt,
            ablation,
            monitor_split,
        } => {
            let mut cfg = load_config(&common)?;
            apply(&mut cfg, &overrides);
            if let Some(a) = ablation {
                cfg.train.ablation = a.into();
            }
            let source = SegModelCheckpoint::load(&source_ckpt)?;
            start(&cfg, &common.out)?;
            let target = load_dataset(&data, "target_train")?;
            let monitor = match &monitor_split {
                Some(s) => Some(load_dataset(&data, s)?),
                None => None,
            };
            adapt(&source, &target, &cfg.train, Some(&common.out), monitor.as_deref())?;
            println!("wrote {}", common.out.join("model.ckpt").display());
        }
        Command::Evaluate {
            out,
            data,
            ckpt,
            split,
        } => {
            let model = SegModelCheckpoint::load(&ckpt)?.to_model()?;
            let samples = load_dataset(&data, &split)?;
            fresh_dir(&out)?;
            let report = evaluate_dataset(&model, &samples)?;
            report.write(&out)?;
            let m = &report.mean;
            println!(
                "{split}: n={} dice {:.4} iou {:.4} wF {:.4} S {:.4} Emax {:.4} MAE {:.4}",
                report.n_images, m.dice, m.iou, m.weighted_f, m.s_measure, m.e_measure_max, m.mae
            );
        }
        Command::Sweep {
            common,
            overrides,
            data,
            source_ckpt,
            betas,
            gammas,
            jobs,
        } => {
            let mut cfg = load_config(&common)?;
            apply(&mut cfg, &overrides);
            let source = SegModelCheckpoint::load(&source_ckpt)?;
            start(&cfg, &common.out)?;
            let train = load_dataset(&data, "target_train")?;
            let test = load_dataset(&data, "target_test")?;
            let report = sweep(&source, &train, &test, &cfg.train, &betas, &gammas, &common.out, jobs)?;
            print!("{}", report.to_csv());
            println!("Dice spread over grid: {:.4}", report.dice_spread);
            if let Some(s) = report.beta_spread_at_gamma_one {
                println!("Dice spread over beta at gamma=1: {s:.4}");
            }
        }
        Command::Visualize {
            out,
            data,
            ckpt,
            split,
            limit,
        } => {
            let model = SegModelCheckpoint::load(&ckpt)?.to_model()?;
            let samples = load_dataset(&data, &split)?;
            fresh_dir(&out)?;
            for s in samples.iter().take(limit.unwrap_or(usize::MAX)) {
                let (logits, _) = model.forward(&s.image)?;
                viz::write_maps(&out, &s.sample_id, &logits)?;
            }
        }
        Command::Experiment {
            common,
            overrides,
            seeds,
        } => {
            let mut cfg = load_config(&common)?;
            apply(&mut cfg, &overrides);
            if seeds.is_empty() {
                return Err(Error::Config("no seeds given".into()));
            }
            start(&cfg, &common.out)?;
            let ablations = [Ablation::Full, Ablation::NoFcl, Ablation::NoCcpl];
            let mut results = Vec::new();
            for &seed in &seeds {
                let r = run_seed(&cfg, seed, &ablations, &common.out.join(format!("seed_{seed}")))?;
                println!(
                    "seed {seed}: source-val {:.4} no-adapt {:.4} full {:.4} no_fcl {:.4} no_ccpl {:.4}",
                    r.source_val.dice,
                    r.no_adaptation.dice,
                    r.dice(Ablation::Full).unwrap_or(f64::NAN),
                    r.dice(Ablation::NoFcl).unwrap_or(f64::NAN),
                    r.dice(Ablation::NoCcpl).unwrap_or(f64::NAN),
                );
                results.push(r);
                let csv = common.out.join("experiment.csv");
                std::fs::write(&csv, experiment_csv(&results, &ablations))
                    .map_err(|e| Error::io(&csv, e))?;
                let json = common.out.join("experiment.json");
                std::fs::write(&json, serde_json::to_vec_pretty(&results)?)
                    .map_err(|e| Error::io(&json, e))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
