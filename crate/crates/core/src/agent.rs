//! Replay memory, ε-greedy control and the DQN / Double DQN training loop.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, EnvError, EnvState, Outcome, QseEnv};
use crate::linalg::ComplexMatrix;
use crate::model::{fidelity, purity, trace_distance, DensityMatrix};
use crate::nn::{Adam, AdamConfig, Mlp, MlpSpec, NnError};
use crate::sequence::{SequenceRecord, StepStats};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: {source}\n{dump}")]
    Diverged {
        step: u64,
        source: NnError,
        dump: String,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dqn,
    Ddqn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_min: f64,
    pub eps_decay_steps: u64,
    pub episodes_per_training_step: usize,
    pub batch_size: usize,
    pub algorithm: Algorithm,
    pub replay_capacity: usize,
    /// Soft-update weight of the main network in the target network (DDQN).
    pub target_mix: f64,
    pub training_steps: u64,
    #[serde(default = "one")]
    pub updates_per_training_step: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Threads used for episode collection. Results do not depend on it.
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

fn default_learning_rate() -> f64 {
    AdamConfig::default().learning_rate
}

impl AgentConfig {
    /// Defaults with ε decaying over the first 60% of `training_steps`.
    pub fn with_training_steps(training_steps: u64) -> Self {
        Self {
            gamma: 0.95,
            eps_start: 1.0,
            eps_min: 0.1,
            eps_decay_steps: (training_steps * 3 / 5).max(1),
            episodes_per_training_step: 20,
            batch_size: 64,
            algorithm: Algorithm::Dqn,
            replay_capacity: 50_000,
            target_mix: 0.01,
            training_steps,
            updates_per_training_step: 1,
            learning_rate: default_learning_rate(),
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0 <= self.eps_min && self.eps_min <= self.eps_start && self.eps_start <= 1.0) {
            return bad("need 0 <= eps_min <= eps_start <= 1");
        }
        if self.eps_decay_steps == 0 {
            return bad("eps_decay_steps must be positive");
        }
        if self.episodes_per_training_step == 0 || self.batch_size == 0 {
            return bad("episodes_per_training_step and batch_size must be positive");
        }
        if self.replay_capacity < self.batch_size {
            return bad("replay_capacity must be at least batch_size");
        }
        if !(0.0..=1.0).contains(&self.target_mix) {
            return bad("target_mix must lie in [0, 1]");
        }
        if self.updates_per_training_step == 0 || self.workers == 0 {
            return bad("updates_per_training_step and workers must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Action,
    pub s_next: Vec<f64>,
    pub r: f64,
    pub terminal: bool,
}

/// Fixed-capacity ring buffer; the oldest transition is evicted first.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    buffer: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayMemory {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            buffer: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.buffer.iter()
    }

    /// Uniform sample with replacement. Empty if the memory is empty.
    pub fn sample(&mut self, n: usize) -> Vec<&Transition> {
        if self.buffer.is_empty() {
            return Vec::new();
        }
        let idx: Vec<usize> = (0..n)
            .map(|_| self.rng.random_range(0..self.buffer.len()))
            .collect();
        idx.into_iter().map(|i| &self.buffer[i]).collect()
    }
}

/// Lowest index among the maxima.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy over the network's Q-values. One uniform draw decides between
/// exploring and exploiting, so the random stream does not depend on the
/// network.
pub fn select_action<R: Rng + ?Sized>(
    qnet: &Mlp,
    s: &[f64],
    eps: f64,
    rng: &mut R,
) -> Result<Action, NnError> {
    if rng.random::<f64>() < eps {
        let i = rng.random_range(0..Action::COUNT);
        return Ok(Action::new(i).expect("index below COUNT"));
    }
    let q = qnet.forward(s)?;
    Ok(Action::new(argmax(&q)).expect("network has one head per action"))
}

pub fn epsilon_at(step: u64, cfg: &AgentConfig) -> f64 {
    let slope = (cfg.eps_start - cfg.eps_min) / cfg.eps_decay_steps as f64;
    (cfg.eps_start - step as f64 * slope).max(cfg.eps_min)
}

fn check_batch(batch: &[&Transition]) -> Result<(), NnError> {
    if batch.is_empty() {
        Err(NnError::EmptyBatch)
    } else {
        Ok(())
    }
}

/// y = r for terminal transitions, r + γ·max Q(s′,·) otherwise.
pub fn dqn_targets(batch: &[&Transition], main: &Mlp, gamma: f64) -> Result<Vec<f64>, NnError> {
    check_batch(batch)?;
    batch
        .iter()
        .map(|t| {
            if t.terminal {
                return Ok(t.r);
            }
            let q = main.forward(&t.s_next)?;
            Ok(t.r + gamma * q[argmax(&q)])
        })
        .collect()
}

/// y = r for terminal transitions, otherwise r + γ·Q_target(s′, a*) with a*
/// the main network's greedy action.
pub fn ddqn_targets(
    batch: &[&Transition],
    main: &Mlp,
    target: &Mlp,
    gamma: f64,
) -> Result<Vec<f64>, NnError> {
    check_batch(batch)?;
    batch
        .iter()
        .map(|t| {
            if t.terminal {
                return Ok(t.r);
            }
            let a = argmax(&main.forward(&t.s_next)?);
            Ok(t.r + gamma * target.forward(&t.s_next)?[a])
        })
        .collect()
}

/// One played episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub total_reward: f64,
    pub outcome: Outcome,
    pub record: SequenceRecord,
}

impl Episode {
    pub fn succeeded(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

/// Plays one episode under ε-greedy control. With `full_stats` the record
/// also carries trace distance and purity per step; otherwise those are 0.
pub fn play_episode<R: Rng + ?Sized>(
    env: &QseEnv,
    qnet: &Mlp,
    eps: f64,
    rng: &mut R,
    full_stats: bool,
) -> Result<Episode, AgentError> {
    let start = env.draw_start(rng);
    let mut state = EnvState::new(env.start_state(start), 0, false);
    let target = full_stats
        .then(|| DensityMatrix::new_unchecked(ComplexMatrix::outer(env.target_ket())));
    let mut transitions = Vec::new();
    let mut actions = Vec::new();
    let mut per_step = Vec::new();
    let mut total_reward = 0.0;
    let mut success_rate = 1.0;
    let mut outcome = Outcome::Continue;
    while !state.done {
        let a = select_action(qnet, &state.encoding, eps, rng)?;
        let step = env.step(&state, a)?;
        let (td, pur, fid) = match &target {
            Some(t) if step.outcome != Outcome::Fatal => {
                let bath = step
                    .next
                    .rho
                    .trace_out_first(2)
                    .map_err(EnvError::from)?;
                let f = fidelity(&bath, t).map_err(EnvError::from)?;
                (trace_distance(&bath, t), purity(&bath), f)
            }
            _ => (0.0, 0.0, step.fidelity),
        };
        per_step.push(StepStats {
            success_prob: step.success_prob,
            fidelity: fid,
            trace_distance: td,
            purity: pur,
        });
        actions.push(a);
        success_rate *= step.success_prob;
        total_reward += step.reward;
        outcome = step.outcome;
        transitions.push(Transition {
            s: std::mem::take(&mut state.encoding),
            a,
            s_next: step.next.encoding.clone(),
            r: step.reward,
            terminal: step.done,
        });
        state = step.next;
    }
    let final_fidelity = per_step.last().map_or(0.0, |s| s.fidelity);
    Ok(Episode {
        transitions,
        total_reward,
        outcome,
        record: SequenceRecord {
            start,
            actions,
            per_step,
            success_rate,
            final_fidelity,
            success: outcome == Outcome::Success,
            total_reward: Some(total_reward),
        },
    })
}

/// Generator for episode `index` of a run seeded by `master_seed`. Episodes
/// use streams 1, 2, ...; stream 0 is reserved for replay sampling.
pub fn episode_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index + 1);
    rng
}

fn replay_rng(master_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(0);
    rng
}

fn thread_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool")
}

/// Plays episodes `first..first + n` in parallel; output is in index order.
#[allow(clippy::too_many_arguments)]
fn collect_episodes(
    pool: &rayon::ThreadPool,
    env: &QseEnv,
    qnet: &Mlp,
    eps: f64,
    master_seed: u64,
    first: u64,
    n: usize,
    full_stats: bool,
) -> Result<Vec<Episode>, AgentError> {
    let play = |i: u64| play_episode(env, qnet, eps, &mut episode_rng(master_seed, i), full_stats);
    if pool.current_num_threads() <= 1 {
        return (first..first + n as u64).map(play).collect();
    }
    pool.install(|| {
        (first..first + n as u64)
            .into_par_iter()
            .map(play)
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainingRow {
    pub step: u64,
    pub epsilon: f64,
    pub episodes: usize,
    pub avg_return: f64,
    pub success_fraction: f64,
    /// Mean loss of this step's updates; `None` while replay is filling.
    pub loss_mean: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub rows: Vec<TrainingRow>,
}

impl TrainingLog {
    /// Tab-separated table with a header line.
    pub fn to_table(&self) -> String {
        let mut out = String::from("step\tepsilon\tepisodes\tavg_return\tsuccess_fraction\tloss_mean\n");
        for r in &self.rows {
            let loss = r.loss_mean.map_or("-".to_string(), |l| format!("{l:.6e}"));
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{}\t{:.6}\t{:.6}\t{}",
                r.step, r.epsilon, r.episodes, r.avg_return, r.success_fraction, loss
            );
        }
        out
    }

    /// Mean of `avg_return` over the last `n` rows.
    pub fn tail_mean_return(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        tail.iter().map(|r| r.avg_return).sum::<f64>() / tail.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub log: TrainingLog,
    pub network: Mlp,
    /// Copies of the main network at the requested steps, in step order.
    pub checkpoints: Vec<(u64, Mlp)>,
}

/// Runs `cfg.training_steps` training steps. Each step collects
/// `episodes_per_training_step` episodes at the current ε, stores their
/// transitions, and performs `updates_per_training_step` gradient updates
/// once the replay memory holds at least one batch.
pub fn run_training(
    env: &QseEnv,
    cfg: &AgentConfig,
    spec: &MlpSpec,
    master_seed: u64,
    checkpoint_steps: &[u64],
) -> Result<TrainingResult, AgentError> {
    cfg.validate()?;
    if spec.input_size != env.encoding_len() {
        return Err(AgentError::InvalidConfig(format!(
            "network input size {} does not match state encoding length {}",
            spec.input_size,
            env.encoding_len()
        )));
    }
    let mut main = Mlp::new(spec.clone())?;
    let mut target = main.clone();
    let mut adam = Adam::new(cfg.adam(), &main);
    let mut replay = ReplayMemory::new(cfg.replay_capacity, replay_rng(master_seed));
    let pool = thread_pool(cfg.workers);
    let mut log = TrainingLog::default();
    let mut checkpoints = Vec::new();

    for step in 1..=cfg.training_steps {
        let eps = epsilon_at(step - 1, cfg);
        let first = (step - 1) * cfg.episodes_per_training_step as u64;
        let episodes = collect_episodes(
            &pool,
            env,
            &main,
            eps,
            master_seed,
            first,
            cfg.episodes_per_training_step,
            false,
        )?;
        let n = episodes.len() as f64;
        let avg_return = episodes.iter().map(|e| e.total_reward).sum::<f64>() / n;
        let success_fraction = episodes.iter().filter(|e| e.succeeded()).count() as f64 / n;
        for e in episodes {
            for t in e.transitions {
                replay.push(t);
            }
        }

        let mut loss_mean = None;
        if replay.len() >= cfg.batch_size {
            let mut total = 0.0;
            for _ in 0..cfg.updates_per_training_step {
                let batch = replay.sample(cfg.batch_size);
                let loss = update(&mut main, &target, &mut adam, &batch, cfg).map_err(|source| {
                    AgentError::Diverged {
                        step,
                        dump: divergence_dump(&log, &batch, &main),
                        source,
                    }
                })?;
                if cfg.algorithm == Algorithm::Ddqn {
                    target.soft_update(&main, cfg.target_mix)?;
                }
                total += loss;
            }
            loss_mean = Some(total / cfg.updates_per_training_step as f64);
        }

        log.rows.push(TrainingRow {
            step,
            epsilon: eps,
            episodes: cfg.episodes_per_training_step,
            avg_return,
            success_fraction,
            loss_mean,
        });
        if checkpoint_steps.contains(&step) {
            checkpoints.push((step, main.clone()));
        }
    }
    Ok(TrainingResult {
        log,
        network: main,
        checkpoints,
    })
}

fn update(
    main: &mut Mlp,
    target: &Mlp,
    adam: &mut Adam,
    batch: &[&Transition],
    cfg: &AgentConfig,
) -> Result<f64, NnError> {
    let ys = match cfg.algorithm {
        Algorithm::Dqn => dqn_targets(batch, main, cfg.gamma)?,
        Algorithm::Ddqn => ddqn_targets(batch, main, target, cfg.gamma)?,
    };
    let inputs: Vec<Vec<f64>> = batch.iter().map(|t| t.s.clone()).collect();
    let pairs: Vec<(Action, f64)> = batch.iter().zip(ys).map(|(t, y)| (t.a, y)).collect();
    main.train_batch(adam, &inputs, &pairs)
}

fn divergence_dump(log: &TrainingLog, batch: &[&Transition], main: &Mlp) -> String {
    let mut out = String::from("recent training rows:\n");
    let recent = TrainingLog {
        rows: log.rows[log.rows.len().saturating_sub(5)..].to_vec(),
    };
    out.push_str(&recent.to_table());
    let rewards: Vec<f64> = batch.iter().map(|t| t.r).collect();
    let max_abs = main
        .flatten()
        .iter()
        .fold(0.0_f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
    let _ = writeln!(out, "batch rewards: {rewards:?}");
    let _ = writeln!(out, "largest |parameter|: {max_abs:e}");
    out
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub returns: Vec<f64>,
    pub records: Vec<SequenceRecord>,
}

impl Evaluation {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    pub fn success_fraction(&self) -> f64 {
        self.records.iter().filter(|r| r.success).count() as f64 / self.records.len() as f64
    }
}

/// Plays `n_episodes` episodes without learning. Episode `i` draws from
/// [`episode_rng`]`(seed, i)`.
pub fn evaluate_policy(
    qnet: &Mlp,
    env: &QseEnv,
    eps: f64,
    n_episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<Evaluation, AgentError> {
    if n_episodes == 0 {
        return Err(AgentError::InvalidConfig("n_episodes must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(AgentError::InvalidConfig("eps must lie in [0, 1]".into()));
    }
    let pool = thread_pool(workers.max(1));
    let episodes = collect_episodes(&pool, env, qnet, eps, seed, 0, n_episodes, true)?;
    let returns = episodes.iter().map(|e| e.total_reward).collect();
    let records = episodes.into_iter().map(|e| e.record).collect();
    Ok(Evaluation { returns, records })
}
