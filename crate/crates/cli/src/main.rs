use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rlcm_core::exp::{self, Arm, ExperimentConfig};
use rlcm_core::rewards::TaskKind;
use rlcm_core::Error;

#[derive(Parser)]
#[command(name = "rlcm", version, about = "Pretrain, fine-tune and evaluate toy consistency models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model for each seed.
    Pretrain(Common),
    /// Fine-tune pretrained checkpoints against the task reward.
    Finetune(Common),
    /// Fine-tune and evaluate over several sampling horizons.
    AblateHorizon(Common),
    /// Compare both arms' fine-tuned models under generation time budgets.
    EvalTimeBudget(Common),
    /// Render figures from metric files.
    Plot {
        /// Metric files; defaults to every CSV in the output directory.
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_arm)]
    arm: Option<Arm>,
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    #[arg(long)]
    horizon: Option<usize>,
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    Arm::parse(s).ok_or_else(|| format!("expected rlcm or ddpo, got {s:?}"))
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::parse(s).ok_or_else(|| format!("expected compress, incompress, target2d or blackbox, got {s:?}"))
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(task) = self.task {
            cfg.task = task;
            // the dataset follows the task unless the file pinned one
            if self.config.is_none() {
                cfg.dataset = None;
            }
        }
        if let Some(arm) = self.arm {
            cfg.arm = arm;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(h) = self.horizon {
            cfg.train.horizon = h;
            cfg.eval.horizons = vec![h];
        }
        cfg.apply_env()?;
        cfg.resolve()?;
        Ok(cfg)
    }
}

fn hint(e: Error) -> anyhow::Error {
    match e {
        Error::Missing(ref p) if p.extension().is_some_and(|x| x == "ckpt") => {
            anyhow::Error::new(e).context("the input checkpoint does not exist; run the preceding command (pretrain or finetune) with the same config and arm first")
        }
        other => other.into(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            for p in exp::cmd_pretrain(&c.resolve()?).map_err(hint)? {
                println!("{}", p.display());
            }
        }
        Command::Finetune(c) => {
            for p in exp::cmd_finetune(&c.resolve()?).map_err(hint)? {
                println!("{}", p.display());
            }
        }
        Command::AblateHorizon(c) => {
            for r in exp::cmd_ablate_horizon(&c.resolve()?).map_err(hint)? {
                println!(
                    "H={} seed={} reward={:.4} infer_seconds={:.3e}",
                    r.horizon, r.seed, r.reward_mean, r.infer_seconds
                );
            }
        }
        Command::EvalTimeBudget(c) => {
            for r in exp::cmd_eval_time_budget(&c.resolve()?).map_err(hint)?.points {
                let reward = r.reward_mean.map_or("missing".to_string(), |m| format!("{m:.4}"));
                println!(
                    "{} seed={} budget={:.4}s completed={} reward={reward}",
                    r.arm, r.seed, r.budget_seconds, r.completed
                );
            }
        }
        Command::Plot { files, out } => {
            let out = out.unwrap_or_else(|| ExperimentConfig::default().out_dir);
            let files = if files.is_empty() {
                let mut found: Vec<PathBuf> = std::fs::read_dir(&out)
                    .with_context(|| format!("reading {}", out.display()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                        name.ends_with(".csv")
                            && ["metrics_", "ablation_", "budget_"].iter().any(|pre| name.starts_with(pre))
                    })
                    .collect();
                found.sort();
                found
            } else {
                files
            };
            if files.is_empty() {
                bail!("no metric files found in {}", out.display());
            }
            for p in exp::cmd_plot(&files, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
