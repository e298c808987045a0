use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use slotadapt::experiment::{self, AdaptStart, Grid, Split};
use slotadapt::{Checkpoint, CheckpointKind, RunConfig};

/// Slot-guided source-free adaptation on a synthetic detection benchmark.
#[derive(Parser)]
#[command(name = "slotadapt", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set n=4`. Repeatable; beats the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to $SLOTADAPT_OUT, then `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Read datasets exported by `gen-data` instead of regenerating them.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let mut cfg = RunConfig::parse(&text, &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }

    fn data(&self) -> Option<&Path> {
        self.data.as_deref()
    }
}

#[derive(Subcommand)]
enum Verb {
    /// Export every split as PPM images plus annotation CSVs.
    GenData(Common),
    /// Supervised training on the source split.
    Pretrain(Common),
    /// Unsupervised adaptation on the target split.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Pretraining checkpoint to start from.
        #[arg(long, required_unless_present = "resume")]
        from: Option<PathBuf>,
        /// Adaptation checkpoint to continue; its stored configuration is used.
        #[arg(long, conflicts_with = "from")]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split (its own training split by default).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
    },
    /// Check the analytical properties and write the report.
    Theory {
        #[command(flatten)]
        common: Common,
        /// Random instances per property.
        #[arg(long, default_value_t = 200)]
        cases: usize,
    },
    /// Write coarse and fine slot masks over the first scenes of a split.
    VizMasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "target-eval")]
        split: String,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Run ablation grids over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Grids to run: methods, slots, schedules. All by default.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
    },
}

fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn out_dir(common: &Common, ckpt: &Checkpoint) -> PathBuf {
    common.out.clone().unwrap_or_else(|| ckpt.config.out_dir.clone())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.verb {
        Verb::GenData(common) => {
            let dir = experiment::gen_data(&common.config()?)?;
            println!("wrote {}", dir.display());
        }
        Verb::Pretrain(common) => {
            let cfg = common.config()?;
            let r = experiment::run_pretrain(&cfg, common.data())?;
            println!("source-train f1 {:.6}  target-eval f1 {:.6}", r.train.f1, r.target.f1);
        }
        Verb::Adapt { common, from, resume } => {
            let (cfg, start) = match (from, resume) {
                (_, Some(path)) => {
                    let ckpt = load(&path)?;
                    if ckpt.kind != CheckpointKind::Adapt {
                        bail!("{} is not an adaptation checkpoint", path.display());
                    }
                    let mut cfg = ckpt.config.clone();
                    if let Some(out) = &common.out {
                        cfg.out_dir = out.clone();
                    }
                    (cfg, AdaptStart::Resume(ckpt.adapt_state()?))
                }
                (Some(path), None) => {
                    let ckpt = load(&path)?;
                    let cfg = common.config()?;
                    if ckpt.config.model != cfg.model {
                        bail!("model settings differ from the ones {} was trained with", path.display());
                    }
                    (cfg, AdaptStart::Pretrained(ckpt.primary_params()?.clone()))
                }
                (None, None) => bail!("need --from or --resume"),
            };
            let r = experiment::run_adapt(&cfg, start, common.data())?;
            println!("target-train f1 {:.6}  target-eval f1 {:.6}", r.train.f1, r.target.f1);
        }
        Verb::Eval { common, checkpoint, split } => {
            let ckpt = load(&checkpoint)?;
            let split = split.as_deref().map(Split::parse).transpose()?;
            let r = experiment::run_eval(&ckpt, split, &out_dir(&common, &ckpt), common.data())?;
            println!("{} f1 {:.6}  map {:.6}  -> {}", r.split.name(), r.result.f1, r.result.map, r.path.display());
        }
        Verb::Theory { common, cases } => {
            let report = experiment::run_theory(&common.config()?, cases)?;
            print!("{}", report.summary());
            return Ok(report.all_passed());
        }
        Verb::VizMasks { common, checkpoint, split, count } => {
            let ckpt = load(&checkpoint)?;
            let paths = experiment::run_viz_masks(&ckpt, Split::parse(&split)?, count, &out_dir(&common, &ckpt), common.data())?;
            println!("wrote {} images", paths.len());
        }
        Verb::Ablate { common, grid } => {
            let cfg = common.config()?;
            let grids =
                if grid.is_empty() { Grid::ALL.to_vec() } else { grid.iter().map(|g| Grid::parse(g)).collect::<slotadapt::Result<_>>()? };
            let rows = experiment::run_ablate(&cfg, &grids)?;
            for g in grids {
                for (name, f1) in experiment::median_f1(&rows, g) {
                    println!("{:<10} {:<14} median f1 {f1:.4}", g.name(), name);
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
