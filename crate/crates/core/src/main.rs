use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spalmtl::config::RunConfig;
use spalmtl::engine::Shots;
use spalmtl::pipeline::{self, TrainOptions};

#[derive(Parser)]
#[command(name = "spalmtl", version, about = "Multi-task training with shared parallel attention layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `out_dir`, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic suite as JSONL files.
    GenData(Common),
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write a resumable checkpoint every N steps.
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Continue from a resumable checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Skip writing final and best checkpoints.
        #[arg(long)]
        no_checkpoints: bool,
    },
    /// Score a checkpoint on every configured task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Train across SPAL widths and seeds.
    SweepCapacity {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "12,60,204,408,816")]
        hidden: String,
        #[arg(long, default_value = "1-5")]
        seeds: String,
    },
    /// Retrain with tasks removed cumulatively.
    AblateTasks {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "TSA,SC,NC,NAD,FSRL")]
        order: String,
        #[arg(long, default_value = "1-5")]
        seeds: String,
    },
    /// Pretrain on the other tasks, then fine-tune on a target with few shots.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 2000)]
        pretrain_steps: u64,
        #[arg(long, default_value_t = 400)]
        train_shots: usize,
        #[arg(long, default_value_t = 400)]
        dev_shots: usize,
        #[arg(long, default_value = "1-5")]
        seeds: String,
    },
    /// Relatedness diagnostics for a checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Parses `1-5`, `1,2,3` or mixtures such as `1-3,7`.
fn parse_list<T>(text: &str) -> Result<Vec<T>>
where
    T: std::str::FromStr + Copy + PartialOrd + std::ops::Add<Output = T> + From<u8>,
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (mut x, hi): (T, T) = (a.trim().parse()?, b.trim().parse()?);
                if x > hi {
                    bail!("empty range `{part}`");
                }
                while x <= hi {
                    out.push(x);
                    x = x + T::from(1);
                }
            }
            None => out.push(part.parse().with_context(|| format!("bad list entry `{part}`"))?),
        }
    }
    if out.is_empty() {
        bail!("empty list `{text}`");
    }
    Ok(out)
}

fn setup(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok((cfg, out))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn report(out: &Path) {
    eprintln!("outputs in {}", out.display());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(common) => {
            let (cfg, out) = setup(&common)?;
            let path = pipeline::gen_data(&cfg, &out)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Train {
            common,
            seed,
            checkpoint_every,
            resume,
            no_checkpoints,
        } => {
            let (cfg, out) = setup(&common)?;
            let opts = TrainOptions {
                out: Some(out.clone()),
                save_checkpoints: !no_checkpoints,
                checkpoint_every,
                resume,
            };
            let run = pipeline::train(&cfg, seed, &opts)?;
            for t in &run.record.tasks {
                if let Some(b) = &t.best {
                    println!("{}: best {} at step {}", t.task, b.score, b.step);
                }
            }
            report(&out);
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let (cfg, out) = setup(&common)?;
            print_json(&pipeline::eval(&cfg, &checkpoint, &split, Some(&out))?)?;
        }
        Command::SweepCapacity { common, hidden, seeds } => {
            let (cfg, out) = setup(&common)?;
            let points = pipeline::sweep_capacity(&cfg, &parse_list(&hidden)?, &parse_list(&seeds)?, &out)?;
            for p in &points {
                let scores: Vec<String> =
                    p.aggregate.tasks.iter().map(|t| format!("{} {:.4}±{:.4}", t.task, t.mean, t.std)).collect();
                println!("h={} ({:.4}%): {}", p.hidden, 100.0 * p.capacity_fraction, scores.join(", "));
            }
            report(&out);
        }
        Command::AblateTasks { common, order, seeds } => {
            let (cfg, out) = setup(&common)?;
            let order: Vec<String> = order.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            let stages = pipeline::ablate_tasks(&cfg, &order, &parse_list(&seeds)?, &out)?;
            for s in &stages {
                let scores: Vec<String> =
                    s.aggregate.tasks.iter().map(|t| format!("{} {:.4}±{:.4}", t.task, t.mean, t.std)).collect();
                println!("dropped [{}]: {}", s.dropped.join(","), scores.join(", "));
            }
            report(&out);
        }
        Command::Transfer {
            common,
            target,
            pretrain_steps,
            train_shots,
            dev_shots,
            seeds,
        } => {
            let (cfg, out) = setup(&common)?;
            let shots = Shots {
                train: train_shots,
                dev: dev_shots,
            };
            let r = pipeline::transfer(&cfg, &target, pretrain_steps, shots, &parse_list(&seeds)?, &out)?;
            for rec in &r.records {
                if let Some(b) = rec.tasks.first().and_then(|t| t.best.as_ref()) {
                    println!("seed {}: {} best {} at step {}", rec.seed, target, b.score, b.step);
                }
            }
            report(&out);
        }
        Command::Analyze { common, checkpoint } => {
            let (cfg, out) = setup(&common)?;
            pipeline::analyze(&cfg, &checkpoint, &out)?;
            report(&out);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::parse_list;

    #[test]
    fn lists_and_ranges() {
        assert_eq!(parse_list::<u64>("1-5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_list::<usize>("12,204, 816").unwrap(), vec![12, 204, 816]);
        assert_eq!(parse_list::<u64>("1-2,7").unwrap(), vec![1, 2, 7]);
        assert!(parse_list::<u64>("5-1").is_err());
        assert!(parse_list::<u64>("").is_err());
        assert!(parse_list::<u64>("a").is_err());
    }
}
