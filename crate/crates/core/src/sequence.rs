//! Deterministic replay, exhaustive enumeration and statistics of
//! measurement sequences.
//!
//! A sequence is a list of [`Action`]s; every action is preceded by one free
//! evolution U(τ). The compact notation `U2 Px+` (two evolutions, then a
//! projection) is therefore the same as `noop Px+`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, QseEnv, StartMode};
use crate::model::{
    self, fidelity, fidelity_pure, purity, singlet_chain, trace_distance, Axis, CentralProjector,
    DensityMatrix, ModelError, ModelParams, Sign,
};

/// Largest enumeration allowed by default: 7^6 leaf sequences.
pub const DEFAULT_SEARCH_BUDGET: u64 = 117_649;
/// Default pruning threshold on the running success rate.
pub const DEFAULT_RATE_CUTOFF: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("measurement underflow at step {step} ({action}); partial record kept")]
    Underflow {
        step: usize,
        action: Action,
        partial: Box<SequenceRecord>,
    },
    #[error("search over 7^{max_len} sequences exceeds the budget of {budget}")]
    BudgetExceeded { max_len: usize, budget: u64 },
    #[error("sequence parse error at token {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("record file error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed record on line {line}: {message}")]
    Record { line: usize, message: String },
}

/// Quantities after one step of a sequence, all evaluated on the bath state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub success_prob: f64,
    pub fidelity: f64,
    pub trace_distance: f64,
    pub purity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub start: StartMode,
    pub actions: Vec<Action>,
    pub per_step: Vec<StepStats>,
    /// Product of the per-step branch probabilities.
    pub success_rate: f64,
    pub final_fidelity: f64,
    /// Final fidelity exceeded the threshold without any fatal step.
    pub success: bool,
    /// Undiscounted episode return when the record comes from an agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_reward: Option<f64>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn success_rate_percent(&self) -> f64 {
        100.0 * self.success_rate
    }

    /// Actions in the compact evolution notation, e.g. `U2 Px+ U Px+`.
    pub fn notation(&self) -> String {
        format_compact(&self.actions)
    }
}

/// Replays `actions` from `start`, recording bath statistics after each step.
pub fn replay_sequence(
    env: &QseEnv,
    start: StartMode,
    actions: &[Action],
) -> Result<SequenceRecord, SequenceError> {
    let target = DensityMatrix::new_unchecked(crate::linalg::ComplexMatrix::outer(env.target_ket()));
    let mut rho = env.start_state(start);
    let mut record = SequenceRecord {
        start,
        actions: Vec::with_capacity(actions.len()),
        per_step: Vec::with_capacity(actions.len()),
        success_rate: 1.0,
        final_fidelity: env.bath_fidelity(&rho),
        success: false,
        total_reward: None,
    };
    for (i, &action) in actions.iter().enumerate() {
        match env.apply(&rho, action) {
            Ok((next, prob)) => {
                let bath = next.trace_out_first(2)?;
                let f = fidelity(&bath, &target)?;
                record.per_step.push(StepStats {
                    success_prob: prob,
                    fidelity: f,
                    trace_distance: trace_distance(&bath, &target),
                    purity: purity(&bath),
                });
                record.actions.push(action);
                record.success_rate *= prob;
                record.final_fidelity = f;
                rho = next;
            }
            Err(ModelError::NormalizationUnderflow { .. }) => {
                record.success = false;
                return Err(SequenceError::Underflow {
                    step: i + 1,
                    action,
                    partial: Box::new(record),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    record.success = !record.actions.is_empty() && record.final_fidelity > env.config().theta;
    Ok(record)
}

/// One point of a steady-state trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyStatePoint {
    pub success_prob: f64,
    pub fidelity: f64,
    pub trace_distance: f64,
}

/// Repeats U(τ)·P_{x+} from |x+⟩ ⊗ mixed bath and tracks the bath's distance
/// to the singlet chain |Ψ⁻⟩^{⊗N/2}. `lead_in` extra free evolutions precede
/// the first projection.
pub fn verify_steady_state(
    params: &ModelParams,
    lead_in: usize,
    repetitions: usize,
) -> Result<Vec<SteadyStatePoint>, SequenceError> {
    params.validate()?;
    if params.n_bath == 0 || !params.n_bath.is_multiple_of(2) {
        return Err(SequenceError::Invalid(format!(
            "steady state needs an even, non-zero number of bath spins, got {}",
            params.n_bath
        )));
    }
    let u = model::build_propagator(params, params.tau)?;
    let projector = CentralProjector::new(Axis::X, Sign::Plus, params.n_bath);
    let target_ket = singlet_chain(params.n_bath);
    let target = DensityMatrix::new_unchecked(crate::linalg::ComplexMatrix::outer(&target_ket));

    let central = DensityMatrix::pure(&model::spin_ket(Axis::X, Sign::Plus))?;
    let mut rho = central.kron(&DensityMatrix::maximally_mixed(params.bath_dim()));
    for _ in 0..lead_in {
        rho = model::evolve(&rho, &u)?;
    }
    let mut points = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let evolved = model::evolve(&rho, &u)?;
        let (next, prob) = model::measure(&evolved, &projector, model::DEFAULT_PROB_FLOOR)?;
        let bath = next.trace_out_first(2)?;
        points.push(SteadyStatePoint {
            success_prob: prob,
            fidelity: fidelity_pure(&target_ket, &bath),
            trace_distance: trace_distance(&bath, &target),
        });
        rho = next;
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub max_len: usize,
    /// Branches whose running success rate drops below this are pruned.
    pub rate_cutoff: f64,
    /// Upper bound on 7^max_len.
    pub budget: u64,
}

impl SearchOptions {
    pub fn new(max_len: usize) -> Self {
        Self {
            max_len,
            rate_cutoff: DEFAULT_RATE_CUTOFF,
            budget: DEFAULT_SEARCH_BUDGET,
        }
    }
}

/// Enumerates every action sequence up to `max_len` from the configured fixed
/// start. A branch ends at its first success (as an episode would), at a
/// fatal measurement, or when its success rate falls below the cutoff.
/// Successes are sorted by length, then by decreasing success rate.
pub fn exhaustive_search(
    env: &QseEnv,
    opts: SearchOptions,
) -> Result<Vec<SequenceRecord>, SequenceError> {
    let leaves = (Action::COUNT as u64).checked_pow(opts.max_len as u32);
    if leaves.is_none_or(|n| n > opts.budget) {
        return Err(SequenceError::BudgetExceeded {
            max_len: opts.max_len,
            budget: opts.budget,
        });
    }
    let start = match env.config().start_mode {
        StartMode::RandomPure => {
            return Err(SequenceError::Invalid(
                "exhaustive search needs a fixed start state".into(),
            ))
        }
        fixed => fixed,
    };
    if opts.max_len == 0 {
        return Ok(Vec::new());
    }
    let rho0 = env.start_state(start);

    let per_first: Vec<Vec<Vec<Action>>> = Action::all()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|first| {
            let mut found = Vec::new();
            let mut prefix = Vec::with_capacity(opts.max_len);
            expand(env, &opts, &rho0, 1.0, first, &mut prefix, &mut found);
            found
        })
        .collect();

    let mut records = per_first
        .into_iter()
        .flatten()
        .map(|actions| replay_sequence(env, start, &actions))
        .collect::<Result<Vec<_>, _>>()?;
    records.sort_by(|a, b| {
        a.len()
            .cmp(&b.len())
            .then(b.success_rate.total_cmp(&a.success_rate))
            .then_with(|| a.actions.cmp(&b.actions))
    });
    Ok(records)
}

fn expand(
    env: &QseEnv,
    opts: &SearchOptions,
    rho: &DensityMatrix,
    rate: f64,
    action: Action,
    prefix: &mut Vec<Action>,
    found: &mut Vec<Vec<Action>>,
) {
    let Ok((next, prob)) = env.apply(rho, action) else {
        return;
    };
    let rate = rate * prob;
    if rate < opts.rate_cutoff {
        return;
    }
    prefix.push(action);
    if env.bath_fidelity(&next) > env.config().theta {
        found.push(prefix.clone());
    } else if prefix.len() < opts.max_len {
        for a in Action::all() {
            expand(env, opts, &next, rate, a, prefix, found);
        }
    }
    prefix.pop();
}

/// Counts of adjacent ordered action pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActionCombinationHistogram {
    pub counts: BTreeMap<(Action, Action), usize>,
}

impl ActionCombinationHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, first: Action, second: Action) -> usize {
        self.counts.get(&(first, second)).copied().unwrap_or(0)
    }

    /// Pairs sorted by decreasing count, ties in action order.
    pub fn ranked(&self) -> Vec<((Action, Action), usize)> {
        let mut v: Vec<_> = self.counts.iter().map(|(&k, &c)| (k, c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("first\tsecond\tcount\n");
        for ((a, b), c) in self.ranked() {
            let _ = writeln!(out, "{a}\t{b}\t{c}");
        }
        out
    }
}

pub fn combination_histogram<'a, I>(records: I) -> ActionCombinationHistogram
where
    I: IntoIterator<Item = &'a SequenceRecord>,
{
    let mut hist = ActionCombinationHistogram::default();
    for r in records {
        for w in r.actions.windows(2) {
            *hist.counts.entry((w[0], w[1])).or_default() += 1;
        }
    }
    hist
}

/// Successful records with distinct action lists, first occurrence kept.
pub fn unique_successful(records: &[SequenceRecord]) -> Vec<SequenceRecord> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| r.success && seen.insert(r.actions.clone()))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub step: usize,
    pub action: Action,
    pub purity: f64,
    pub fidelity: f64,
    pub trace_distance: f64,
    pub success_prob: f64,
}

pub fn diagnostic_trace(record: &SequenceRecord) -> Vec<DiagnosticRow> {
    record
        .actions
        .iter()
        .zip(&record.per_step)
        .enumerate()
        .map(|(i, (&action, s))| DiagnosticRow {
            step: i + 1,
            action,
            purity: s.purity,
            fidelity: s.fidelity,
            trace_distance: s.trace_distance,
            success_prob: s.success_prob,
        })
        .collect()
}

pub fn diagnostic_table(rows: &[DiagnosticRow]) -> String {
    let mut out = String::from("step\taction\tpurity\tfidelity\ttrace_distance\tsuccess_prob\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.step, r.action, r.purity, r.fidelity, r.trace_distance, r.success_prob
        );
    }
    out
}

/// Parses a sequence such as `U2 Px+ U Px+ Py-` or `noop Px+ Px+`.
///
/// `Uk` (or `U(kτ)`) adds k free evolutions. Each action consumes the pending
/// evolutions: with k pending it expands to k − 1 `noop`s followed by the
/// action; with none pending it carries its own single evolution. Trailing
/// evolutions become `noop`s.
pub fn parse_sequence(text: &str) -> Result<Vec<Action>, SequenceError> {
    let mut actions = Vec::new();
    let mut pending = 0usize;
    for (position, token) in text.split_whitespace().enumerate() {
        if let Some(k) = parse_evolution(token) {
            let k = k.map_err(|message| SequenceError::Parse { position, message })?;
            pending += k;
            continue;
        }
        let action: Action = token
            .parse()
            .map_err(|message| SequenceError::Parse { position, message })?;
        actions.extend(std::iter::repeat_n(Action::NOOP, pending.saturating_sub(1)));
        actions.push(action);
        pending = 0;
    }
    actions.extend(std::iter::repeat_n(Action::NOOP, pending));
    Ok(actions)
}

/// `None` if the token is not an evolution token.
fn parse_evolution(token: &str) -> Option<Result<usize, String>> {
    let rest = token.strip_prefix('U').or_else(|| token.strip_prefix('u'))?;
    let inner = match rest.strip_prefix('(') {
        Some(r) => {
            let Some(body) = r.strip_suffix(')') else {
                return Some(Err(format!("unbalanced parenthesis in '{token}'")));
            };
            body.trim_end_matches(['τ', 't']).trim()
        }
        None => rest,
    };
    if inner.is_empty() {
        return Some(Ok(1));
    }
    Some(match inner.parse::<usize>() {
        Ok(0) => Err(format!("zero-length evolution '{token}'")),
        Ok(k) => Ok(k),
        Err(_) => Err(format!("bad evolution multiplier in '{token}'")),
    })
}

/// Inverse of [`parse_sequence`] in compact form: runs of `noop` before a
/// projection become `Uk`.
pub fn format_compact(actions: &[Action]) -> String {
    let mut parts = Vec::new();
    let mut noops = 0usize;
    for &a in actions {
        if a.is_noop() {
            noops += 1;
            continue;
        }
        parts.push(if noops == 0 {
            "U".to_string()
        } else {
            format!("U{}", noops + 1)
        });
        parts.push(a.name().to_string());
        noops = 0;
    }
    if noops > 0 {
        parts.push(if noops == 1 { "U".into() } else { format!("U{noops}") });
    }
    parts.join(" ")
}

/// Writes records as JSON lines.
pub fn write_records(path: &Path, records: &[SequenceRecord]) -> Result<(), SequenceError> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r).map_err(|e| SequenceError::Invalid(e.to_string()))?,
        );
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads JSON-lines records; blank lines and `#` comments are skipped.
pub fn read_records(path: &Path) -> Result<Vec<SequenceRecord>, SequenceError> {
    parse_records(&fs::read_to_string(path)?)
}

pub fn parse_records(text: &str) -> Result<Vec<SequenceRecord>, SequenceError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SequenceError::Record {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
