use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use emm_harness::report::{emit_report, write_json};
use emm_harness::run::load_test_idx;
use emm_harness::{
    evaluate_accuracy, lambda_sweep, run_experiment, Checkpoint, DataSource, Event, EventSink,
    HarnessError, JsonlSink, RunConfig, SourceKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "emm", about = "Evolving expert mixture experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run only this seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for events.jsonl, the report and checkpoints.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Repeat the run for each λ in a comma-separated ascending grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambda: Vec<f64>,
    },
    /// Accuracy of a saved model on a test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX directory holding t10k-* files. Synthetic runs regenerate
        /// their test set when this is omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Forwards to the JSONL log (if any) and prints progress to stderr.
struct Progress {
    log: Option<JsonlSink>,
}

impl EventSink for Progress {
    fn emit(&mut self, event: &Event) -> Result<(), HarnessError> {
        match event {
            Event::Expand { seed, step, experts } => {
                eprintln!("seed {seed}: expanded to {experts} experts at step {step}");
            }
            Event::SeedDone {
                seed,
                accuracy,
                experts,
                wall_clock_s,
                ..
            } => eprintln!(
                "seed {seed}: accuracy {accuracy:.4}, {experts} experts, {wall_clock_s:.1}s"
            ),
            Event::Check { .. } => {}
        }
        match &mut self.log {
            Some(log) => log.emit(event),
            None => Ok(()),
        }
    }
}

fn load_config(path: &Path, cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(cfg)
}

fn progress(cfg: &RunConfig) -> Result<Progress> {
    let log = match &cfg.out {
        Some(dir) => Some(JsonlSink::create(&dir.join("events.jsonl"))?),
        None => None,
    };
    Ok(Progress { log })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { config } => {
            let cfg = load_config(config, &cli)?;
            let mut sink = progress(&cfg)?;
            let metrics = run_experiment(&cfg, &mut sink)
                .with_context(|| format!("run {:?} failed", cfg.name))?;
            if let Some(dir) = &cfg.out {
                emit_report(&metrics, &dir.join("report.json"))?;
            }
            println!(
                "{}: accuracy {:.4} ± {:.4}, experts {:.2} ({} seeds, {:.1}s)",
                cfg.name,
                metrics.accuracy.mean,
                metrics.accuracy.std,
                metrics.experts.mean,
                metrics.seeds.len(),
                metrics.wall_clock_s
            );
        }
        Command::Sweep { config, lambda } => {
            let cfg = load_config(config, &cli)?;
            let mut sink = progress(&cfg)?;
            let rows = lambda_sweep(&cfg, lambda, &mut sink)?;
            if let Some(dir) = &cfg.out {
                write_json(&rows, &dir.join("sweep.json"))?;
            }
            println!("{:>10}  {:>8}  {:>9}  experts per seed", "lambda", "experts", "accuracy");
            for r in &rows {
                println!(
                    "{:>10.5}  {:>8.2}  {:>9.4}  {:?}",
                    r.lambda, r.mean_experts, r.accuracy.mean, r.experts
                );
            }
        }
        Command::Eval { checkpoint, data } => {
            let ckpt = Checkpoint::restore(checkpoint)?;
            let test = match (data, ckpt.config.stream.source) {
                (Some(dir), _) => {
                    let test = load_test_idx(dir)?;
                    if ckpt.config.stream.downsample {
                        test.downsample_2x2()?
                    } else {
                        test
                    }
                }
                (None, SourceKind::Synthetic) => {
                    DataSource::load(&ckpt.config.stream)?.test_set(&ckpt.config.stream, ckpt.seed)?
                }
                (None, SourceKind::Idx) => bail!("--data is required for IDX checkpoints"),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(ckpt.seed));
            let acc = evaluate_accuracy(&ckpt.model, &test, &mut rng)?;
            println!(
                "accuracy {acc:.4} on {} samples ({} experts)",
                test.len(),
                ckpt.model.num_experts()
            );
        }
    }
    Ok(())
}
