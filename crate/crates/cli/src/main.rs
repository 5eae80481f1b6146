use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qse_cli::commands::{self, summarize};
use qse_cli::config::{resolve_output, RunConfig};
use qse_cli::CliError;
use qse_core::env::{EnvConfig, StartMode};
use qse_core::model::Bell;
use qse_core::sequence::{SearchOptions, DEFAULT_RATE_CUTOFF, DEFAULT_SEARCH_BUDGET};

#[derive(Parser)]
#[command(name = "qse", version, about = "Measurement-based state engineering of a central-spin bath")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write the learning curve, checkpoints and manifest.
    Train {
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a saved network, optionally next to an ε = 1 baseline.
    Evaluate {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config's [evaluation] eps.
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Replay a sequence such as "U2 Px+ U Px+" and print per-step diagnostics.
    Replay {
        /// Run config supplying the model and environment; defaults are used without one.
        config: Option<PathBuf>,
        #[arg(long)]
        sequence: String,
        /// x+, x-, y+, y-, z+ or z-.
        #[arg(long, default_value = "x+")]
        start: String,
        #[arg(long)]
        target: Option<Bell>,
    },
    /// Enumerate all sequences up to a length and list the successful ones.
    Search {
        config: Option<PathBuf>,
        #[arg(long)]
        target: Option<Bell>,
        #[arg(long)]
        max_len: usize,
        #[arg(long, default_value_t = DEFAULT_RATE_CUTOFF)]
        rate_cutoff: f64,
        #[arg(long, default_value_t = DEFAULT_SEARCH_BUDGET)]
        budget: u64,
    },
    /// Count adjacent action pairs in a JSON-lines record file.
    Histogram {
        records: PathBuf,
        #[arg(long)]
        unique_successful: bool,
    },
}

fn env_for(config: Option<&PathBuf>, target: Option<Bell>) -> Result<EnvConfig, CliError> {
    let mut env = match config {
        Some(path) => RunConfig::load(path)?.env_config(),
        None => EnvConfig::default(),
    };
    if let Some(t) = target {
        env.target = t;
    }
    Ok(env)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, output_dir } => {
            let cfg = RunConfig::load(&config)?;
            let dir = output_dir
                .map(|d| resolve_output(&d))
                .unwrap_or_else(|| cfg.resolved_output_dir());
            let out = commands::cmd_train(&cfg, &dir)?;
            let last = out.log.rows.last();
            println!("config_sha256 {}", cfg.hash());
            println!("learning curve: {}", out.curve_path.display());
            for p in &out.checkpoint_paths {
                println!("checkpoint: {}", p.display());
            }
            println!("final network: {}", out.final_path.display());
            if let Some(r) = last {
                println!(
                    "last step {}: epsilon {:.3} avg_return {:.3} success_fraction {:.3}",
                    r.step, r.epsilon, r.avg_return, r.success_fraction
                );
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            eps,
            episodes,
            baseline,
            output_dir,
        } => {
            let cfg = RunConfig::load(&config)?;
            let eps = eps.unwrap_or(cfg.evaluation.eps);
            if !(0.0..=1.0).contains(&eps) {
                return Err(CliError::Config("--eps must lie in [0, 1]".into()));
            }
            let episodes = episodes.unwrap_or(cfg.evaluation.episodes);
            let dir = output_dir
                .map(|d| resolve_output(&d))
                .unwrap_or_else(|| cfg.resolved_output_dir().join("evaluation"));
            let out = commands::cmd_evaluate(&cfg, &checkpoint, eps, episodes, baseline, &dir)?;
            println!("{}", summarize(&format!("eps={eps}"), &out.trained));
            if let Some(b) = &out.baseline {
                println!("{}", summarize("eps=1", b));
            }
            println!("table: {}", out.table_path.display());
        }
        Command::Replay {
            config,
            sequence,
            start,
            target,
        } => {
            let env = env_for(config.as_ref(), target)?;
            let start = StartMode::named(&start).map_err(CliError::Config)?;
            let (_, text) = commands::cmd_replay(env, start, &sequence)?;
            print!("{text}");
        }
        Command::Search {
            config,
            target,
            max_len,
            rate_cutoff,
            budget,
        } => {
            let env = env_for(config.as_ref(), target)?;
            let opts = SearchOptions {
                max_len,
                rate_cutoff,
                budget,
            };
            let (_, text) = commands::cmd_search(env, opts)?;
            print!("{text}");
        }
        Command::Histogram {
            records,
            unique_successful,
        } => {
            let hist = commands::cmd_histogram(&records, unique_successful)?;
            print!("{}", hist.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qse: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
