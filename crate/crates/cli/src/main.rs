use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use uq_core::experiment::{
    cmd_evaluate, cmd_finetune, cmd_finetune_sweep, cmd_pretrain, cmd_report, ExperimentConfig,
};

/// LoRA ensembles with entropic uncertainty on multiple-choice QA.
#[derive(Parser)]
#[command(name = "uq", version)]
struct Cli {
    /// Root for base and run directories; replaces `output_dir` of the config.
    #[arg(long, global = true, env = "UQ_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on the synthetic corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune a LoRA ensemble on a pretrained base.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by `uq pretrain`.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        members: Option<usize>,
        #[arg(long, conflicts_with = "sweep_lambda")]
        lambda_half: Option<f64>,
        /// One run per λ_half in {0.01, 0.1, 1, 10}.
        #[arg(long)]
        sweep_lambda: bool,
        /// Overwrite a finished run with the same config.
        #[arg(long)]
        force: bool,
    },
    /// Score every epoch of a run on its datasets.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated dataset names; all configured ones by default.
        #[arg(long, value_delimiter = ',')]
        datasets: Option<Vec<String>>,
    },
    /// Per-epoch summary table of an evaluated run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(path: &Path, output_root: &Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(root) = output_root {
        cfg.output_dir = root.clone();
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { config, seed } => {
            let mut cfg = load_config(&config, &cli.output_root)?;
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            let out = cmd_pretrain(&cfg)?;
            println!("base: {}", out.dir.display());
            println!(
                "perplexity: {:.4} -> {:.4}",
                out.perplexity_init, out.perplexity_final
            );
        }
        Command::Finetune {
            config,
            base,
            seed,
            members,
            lambda_half,
            sweep_lambda,
            force,
        } => {
            let mut cfg = load_config(&config, &cli.output_root)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(m) = members {
                cfg.train.members = m;
            }
            if let Some(l) = lambda_half {
                cfg.train.lambda_half = l;
            }
            let runs = if sweep_lambda {
                cmd_finetune_sweep(&cfg, &base, force)?
            } else {
                vec![cmd_finetune(&cfg, &base, force)?]
            };
            for r in runs {
                println!("run: {}", r.dir.display());
            }
        }
        Command::Evaluate { run, datasets } => {
            let out = cmd_evaluate(&run, datasets.as_deref())?;
            println!("evaluated {} record files in {}", out.records.len(), run.display());
        }
        Command::Report { run } => {
            print!("{}", cmd_report(&run)?);
        }
    }
    Ok(())
}
