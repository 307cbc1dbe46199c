//! `fork`: train, evaluate and summarise forward-looking actor-critic runs.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fork_core::algorithms::{Checkpoint, Phase, Variant};
use fork_core::gradcheck::{run_gradcheck, GradcheckOptions};
use fork_core::harness::{
    calibrate, evaluate_policy, run_experiment, ExperimentConfig, CHECKPOINT_DIR, CONFIG_FILE, DEFAULT_WINDOW,
    OUTPUT_ROOT_ENV,
};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "fork", version, about = "Forward-looking actor-critic experiments")]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every instance of an experiment and write its run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run a single instance with this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `<output-root>/<run name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the configured algorithm.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        total_steps: Option<u64>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Noise-free evaluation of a saved agent.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Experiment config naming the environment; defaults to the
        /// `config.toml` of the run the checkpoint belongs to.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Best average, std, best instance and sample-complexity tables.
    Stats {
        /// Directory of run directories; defaults to the output root.
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Variant whose best average the others must reach.
        #[arg(long, default_value = "td3")]
        baseline: String,
    },
    /// Learning curves, one figure per environment.
    Plot {
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Moving-average window in evaluation points.
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        /// Figure directory; defaults to `<runs>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic against finite-difference gradients for every network and
    /// actor loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Typical system-model loss on an environment, for choosing the gate
    /// threshold, and a comparison of the two reward-network inputs.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root;
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            variant,
            total_steps,
            instances,
            workers,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(v) = variant {
                cfg.agent.variant = parse_variant(&v)?;
            }
            if let Some(n) = instances {
                cfg.instances = n;
                cfg.seeds.clear();
            }
            if let Some(s) = seed {
                cfg.instances = 1;
                cfg.seeds = vec![s];
            }
            if let Some(t) = total_steps {
                cfg.total_steps = t;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate()?;
            let dir = out.unwrap_or_else(|| root.join(cfg.run_name()));
            let outcome = run_experiment(&cfg, &dir)?;
            let s = &outcome.summary.stats;
            println!(
                "{}: best average {:.4} ± {:.4} at step {}, best instance {:.4}",
                outcome.summary.name, s.best_average, s.std_at_best, s.best_average_step, s.best_instance
            );
            println!("{}", dir.display());
        }
        Command::Eval {
            checkpoint,
            episodes,
            config,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let config_path = match config {
                Some(p) => p,
                None => run_config_for(&checkpoint)?,
            };
            let cfg = ExperimentConfig::load(&config_path)?;
            ck.ensure_config(&cfg.agent)
                .with_context(|| format!("{} does not match {}", checkpoint.display(), config_path.display()))?;
            let mut agent = ck.agent;
            let mut env = cfg.env.build()?;
            let rec = evaluate_policy(|s| agent.select_action(s, Phase::Eval), env.as_mut(), episodes, seed)?;
            println!("{}", serde_json::to_string(&serde_json::json!({
                "episodes": episodes,
                "mean": rec.mean,
                "returns": rec.returns,
            }))?);
        }
        Command::Stats { runs, baseline } => {
            let dir = runs.unwrap_or(root);
            let baseline = parse_variant(&baseline)?;
            let tables = report::collect(&dir, baseline)?;
            print!("{}", tables.render());
            tables.write(&dir)?;
        }
        Command::Plot { runs, window, out } => {
            let dir = runs.unwrap_or(root);
            let out = out.unwrap_or_else(|| dir.join("plots"));
            let written = report::plot(&dir, &out, window)?;
            if written.is_empty() {
                println!("no evaluation records under {}", dir.display());
            }
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Gradcheck { trials, seed } => {
            let report = run_gradcheck(&GradcheckOptions {
                trials,
                seed,
                ..Default::default()
            })?;
            for c in &report.cases {
                let mark = if c.max_relative_error < report.tolerance { "ok" } else { "FAIL" };
                println!(
                    "{mark:>4}  {:<16} trials {:>4}  coords {:>7}  at kinks {:>4}  max rel err {:.3e}",
                    c.name, c.trials, c.coordinates, c.excluded, c.max_relative_error
                );
            }
            println!("{} cases in {:.1}s, tolerance {:e}", report.cases.len(), report.elapsed_secs, report.tolerance);
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
        Command::Calibrate { config, steps, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let c = calibrate(&cfg.env, &cfg.agent, steps, seed)?;
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({
                "env": c.env,
                "steps": c.steps,
                "model_updates": c.system_losses.len(),
                "typical_system_loss": c.typical_system_loss,
                "reward_loss_state_action": c.reward_loss_state_action,
                "reward_loss_state_action_next": c.reward_loss_state_action_next,
            }))?);
        }
    }
    Ok(())
}

fn parse_variant(name: &str) -> Result<Variant> {
    match Variant::parse(name) {
        Some(v) => Ok(v),
        None => {
            let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            bail!("unknown variant {name:?}; expected one of {}", known.join(", "))
        }
    }
}

/// `<run>/checkpoints/instance-N.bin` → `<run>/config.toml`.
fn run_config_for(checkpoint: &Path) -> Result<PathBuf> {
    let candidate = checkpoint
        .parent()
        .filter(|p| p.file_name().is_some_and(|n| n == CHECKPOINT_DIR))
        .and_then(Path::parent)
        .map(|run| run.join(CONFIG_FILE));
    match candidate {
        Some(p) if p.exists() => Ok(p),
        _ => bail!(
            "no run config next to {}; pass --config",
            checkpoint.display()
        ),
    }
}
