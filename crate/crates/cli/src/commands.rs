//! Subcommand implementations. Each returns its data so tests can call them
//! directly; the binary only handles argument parsing and printing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use qse_core::agent::{evaluate_policy, run_training, Evaluation, TrainingLog};
use qse_core::env::{EnvConfig, QseEnv, StartMode};
use qse_core::nn::{load_params, save_params};
use qse_core::sequence::{
    self, combination_histogram, diagnostic_table, diagnostic_trace, exhaustive_search,
    parse_sequence, replay_sequence, unique_successful, ActionCombinationHistogram, SearchOptions,
    SequenceRecord,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Comment lines identifying the producing run.
pub fn header(kind: &str, cfg: &RunConfig) -> String {
    format!(
        "# qse {kind}\n# config_sha256: {}\n# master_seed: {}\n",
        cfg.hash(),
        cfg.master_seed
    )
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub log: TrainingLog,
    pub curve_path: PathBuf,
    pub checkpoint_paths: Vec<PathBuf>,
    pub final_path: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_sha256: String,
    master_seed: u64,
    qse_version: &'a str,
    training_steps: u64,
    learning_curve: &'a str,
    checkpoints: Vec<String>,
    final_network: &'a str,
}

/// Trains per `cfg` and writes into `out_dir`: `learning_curve.tsv`,
/// `checkpoints/step_NNNNNN.json`, `final.json`, `config.toml` and
/// `manifest.json`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutput, CliError> {
    cfg.validate()?;
    let env = cfg.build_env()?;
    let result = run_training(
        &env,
        &cfg.agent,
        &cfg.mlp_spec(),
        cfg.master_seed,
        &cfg.checkpoint_steps,
    )?;

    fs::create_dir_all(out_dir.join("checkpoints"))?;
    let curve_path = out_dir.join("learning_curve.tsv");
    fs::write(
        &curve_path,
        header("learning curve", cfg) + &result.log.to_table(),
    )?;
    let mut checkpoint_paths = Vec::new();
    for (step, net) in &result.checkpoints {
        let path = out_dir.join(format!("checkpoints/step_{step:06}.json"));
        save_params(net, *step, &path)?;
        checkpoint_paths.push(path);
    }
    let final_path = out_dir.join("final.json");
    save_params(&result.network, cfg.agent.training_steps, &final_path)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let manifest = Manifest {
        config_sha256: cfg.hash(),
        master_seed: cfg.master_seed,
        qse_version: VERSION,
        training_steps: cfg.agent.training_steps,
        learning_curve: "learning_curve.tsv",
        checkpoints: checkpoint_paths
            .iter()
            .map(|p| p.strip_prefix(out_dir).unwrap_or(p).display().to_string())
            .collect(),
        final_network: "final.json",
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(TrainOutput {
        log: result.log,
        curve_path,
        checkpoint_paths,
        final_path,
    })
}

#[derive(Debug, Clone)]
pub struct EvaluateOutput {
    pub trained: Evaluation,
    pub baseline: Option<Evaluation>,
    pub table_path: PathBuf,
}

/// Evaluates a saved network at `eps` and, with `baseline`, an ε = 1 policy
/// over the same start states. Writes `evaluation.tsv` and one JSON-lines
/// record file per policy.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    eps: f64,
    episodes: usize,
    baseline: bool,
    out_dir: &Path,
) -> Result<EvaluateOutput, CliError> {
    if episodes == 0 {
        return Err(CliError::Config("episodes must be at least 1".into()));
    }
    let env = cfg.build_env()?;
    let (net, _) = load_params(checkpoint, &cfg.mlp_spec())?;
    let seed = cfg.evaluation.seed;
    let workers = cfg.agent.workers;
    let trained = evaluate_policy(&net, &env, eps, episodes, seed, workers)?;
    let base = if baseline {
        Some(evaluate_policy(&net, &env, 1.0, episodes, seed, workers)?)
    } else {
        None
    };

    fs::create_dir_all(out_dir)?;
    let mut table = header("evaluation", cfg);
    let _ = writeln!(table, "# checkpoint: {}", checkpoint.display());
    table.push_str("policy\tepisode\treturn\tsuccess\tlength\tsuccess_rate\tsequence\n");
    let mut policies = vec![(format!("eps={eps}"), &trained)];
    if let Some(b) = &base {
        policies.push(("eps=1".to_string(), b));
    }
    for (name, ev) in &policies {
        for (i, (ret, rec)) in ev.returns.iter().zip(&ev.records).enumerate() {
            let _ = writeln!(
                table,
                "{name}\t{i}\t{ret}\t{}\t{}\t{:.6e}\t{}",
                rec.success,
                rec.len(),
                rec.success_rate,
                rec.notation()
            );
        }
    }
    let table_path = out_dir.join("evaluation.tsv");
    fs::write(&table_path, table)?;
    write_records(&out_dir.join("records_trained.jsonl"), cfg, &trained.records)?;
    if let Some(b) = &base {
        write_records(&out_dir.join("records_baseline.jsonl"), cfg, &b.records)?;
    }
    Ok(EvaluateOutput {
        trained,
        baseline: base,
        table_path,
    })
}

pub fn write_records(path: &Path, cfg: &RunConfig, records: &[SequenceRecord]) -> Result<(), CliError> {
    let mut out = header("sequence records", cfg);
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// One-line summary of an evaluation.
pub fn summarize(label: &str, ev: &Evaluation) -> String {
    format!(
        "{label}: episodes {} mean_return {:.3} success_fraction {:.3}",
        ev.returns.len(),
        ev.mean_return(),
        ev.success_fraction()
    )
}

/// Replays `sequence_text` from `start` and renders the per-step table
/// followed by a summary.
pub fn cmd_replay(
    env_cfg: EnvConfig,
    start: StartMode,
    sequence_text: &str,
) -> Result<(SequenceRecord, String), CliError> {
    let actions = parse_sequence(sequence_text)?;
    let env = QseEnv::new(env_cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let record = replay_sequence(&env, start, &actions)?;
    let mut out = format!(
        "# target: {}\n# start: {}\n# sequence: {}\n",
        env.config().target,
        start.describe(),
        record.notation()
    );
    out.push_str(&diagnostic_table(&diagnostic_trace(&record)));
    let _ = writeln!(
        out,
        "final_fidelity {:.6}\nsuccess_rate_percent {:.4}\nsuccess {}",
        record.final_fidelity,
        record.success_rate_percent(),
        record.success
    );
    Ok((record, out))
}

/// Exhaustive search from the configured fixed start.
pub fn cmd_search(
    env_cfg: EnvConfig,
    opts: SearchOptions,
) -> Result<(Vec<SequenceRecord>, String), CliError> {
    let env = QseEnv::new(env_cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let found = exhaustive_search(&env, opts)?;
    let mut out = format!(
        "# target: {}\n# max_len: {}\n# rate_cutoff: {:e}\n",
        env.config().target,
        opts.max_len,
        opts.rate_cutoff
    );
    out.push_str("rank\tlength\tfidelity\tsuccess_rate_percent\tsequence\n");
    for (i, r) in found.iter().enumerate() {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.4}\t{}",
            i + 1,
            r.len(),
            r.final_fidelity,
            r.success_rate_percent(),
            r.notation()
        );
    }
    Ok((found, out))
}

/// Pair counts over a JSON-lines record file.
pub fn cmd_histogram(
    records_path: &Path,
    unique_successful_only: bool,
) -> Result<ActionCombinationHistogram, CliError> {
    let records = sequence::read_records(records_path)?;
    let selected = if unique_successful_only {
        unique_successful(&records)
    } else {
        records
    };
    Ok(combination_histogram(&selected))
}
