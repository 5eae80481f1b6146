//! Episodic environment: free evolution for τ followed by one of seven
//! central-spin actions, rewarded when the bath reaches the target Bell state.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{ComplexMatrix, C64};
use crate::model::{
    self, bell_state, Axis, Bell, CentralProjector, DensityMatrix, ModelError, ModelParams, Sign,
    DEFAULT_PROB_FLOOR,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    EpisodeFinished,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("state encoding has length {got}, expected {expected}")]
    EncodingLength { got: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One of the seven actions available after each free evolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Action(u8);

impl Action {
    pub const COUNT: usize = 7;
    pub const PZ_PLUS: Action = Action(0);
    pub const PZ_MINUS: Action = Action(1);
    pub const PX_PLUS: Action = Action(2);
    pub const PX_MINUS: Action = Action(3);
    pub const PY_PLUS: Action = Action(4);
    pub const PY_MINUS: Action = Action(5);
    pub const NOOP: Action = Action(6);

    const NAMES: [&'static str; 7] = ["Pz+", "Pz-", "Px+", "Px-", "Py+", "Py-", "noop"];

    pub fn new(index: usize) -> Option<Action> {
        (index < Self::COUNT).then_some(Action(index as u8))
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..Self::COUNT as u8).map(Action)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }

    /// Axis and sign of the projector, `None` for the identity.
    pub fn projection(self) -> Option<(Axis, Sign)> {
        let axis = match self.0 / 2 {
            0 => Axis::Z,
            1 => Axis::X,
            2 => Axis::Y,
            _ => return None,
        };
        let sign = if self.0.is_multiple_of(2) { Sign::Plus } else { Sign::Minus };
        Some((axis, sign))
    }

    pub fn is_noop(self) -> bool {
        self == Self::NOOP
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let normalized = s.trim().replace(['_', '{', '}'], "");
        let lower = normalized.to_ascii_lowercase();
        match lower.as_str() {
            "noop" | "-" | "i" | "id" | "identity" | "nothing" => return Ok(Action::NOOP),
            _ => {}
        }
        Self::NAMES[..6]
            .iter()
            .position(|n| n.to_ascii_lowercase() == lower)
            .map(|i| Action(i as u8))
            .ok_or_else(|| format!("unknown action '{s}'"))
    }
}

impl TryFrom<String> for Action {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Action> for String {
    fn from(a: Action) -> String {
        a.name().to_string()
    }
}

/// How the central spin is prepared at the start of an episode. The bath
/// always starts maximally mixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// |x+⟩.
    FixedXplus,
    /// Haar-random pure state, drawn per episode.
    RandomPure,
    /// cos(θ/2)|z+⟩ + e^{iφ} sin(θ/2)|z−⟩.
    FixedCustom { theta: f64, phi: f64 },
}

impl StartMode {
    /// Fixed start on one of the six axis eigenstates, e.g. `x-`.
    pub fn named(name: &str) -> Result<StartMode, String> {
        use std::f64::consts::{FRAC_PI_2, PI};
        let (theta, phi) = match name.trim().to_ascii_lowercase().as_str() {
            "x+" => return Ok(StartMode::FixedXplus),
            "random" => return Ok(StartMode::RandomPure),
            "x-" => (FRAC_PI_2, PI),
            "y+" => (FRAC_PI_2, FRAC_PI_2),
            "y-" => (FRAC_PI_2, -FRAC_PI_2),
            "z+" => (0.0, 0.0),
            "z-" => (PI, 0.0),
            other => return Err(format!("unknown start state '{other}'")),
        };
        Ok(StartMode::FixedCustom { theta, phi })
    }

    pub fn describe(&self) -> String {
        match self {
            StartMode::FixedXplus => "x+".into(),
            StartMode::RandomPure => "random".into(),
            StartMode::FixedCustom { theta, phi } => format!("bloch({theta},{phi})"),
        }
    }
}

fn bloch_ket(theta: f64, phi: f64) -> ComplexMatrix {
    ComplexMatrix::column(&[
        C64::new((theta / 2.0).cos(), 0.0),
        C64::from_polar((theta / 2.0).sin(), phi),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub model: ModelParams,
    pub target: Bell,
    /// Fidelity threshold θ.
    pub theta: f64,
    pub r_plus: f64,
    pub r_minus: f64,
    pub r_fatal: f64,
    /// Maximum steps per episode, n_e.
    pub max_steps: usize,
    pub start_mode: StartMode,
    /// Branch probabilities at or below this value end the episode as fatal.
    #[serde(default = "default_floor")]
    pub prob_floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_PROB_FLOOR
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::fixed_start(Bell::PsiMinus, 50)
    }
}

impl EnvConfig {
    /// |x+⟩ start, θ = 0.99, r₊ = 10, r₋ = −1 and r_fatal = −(n_e + 1).
    pub fn fixed_start(target: Bell, max_steps: usize) -> Self {
        Self {
            model: ModelParams::default(),
            target,
            theta: 0.99,
            r_plus: 10.0,
            r_minus: -1.0,
            r_fatal: -(max_steps as f64 + 1.0),
            max_steps,
            start_mode: StartMode::FixedXplus,
            prob_floor: DEFAULT_PROB_FLOOR,
        }
    }

    /// Random pure start with τ = 2.
    pub fn random_start(target: Bell, max_steps: usize) -> Self {
        let mut cfg = Self::fixed_start(target, max_steps);
        cfg.model.tau = 2.0;
        cfg.start_mode = StartMode::RandomPure;
        cfg
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        self.model.validate()?;
        let bad = |msg: String| Err(EnvError::InvalidConfig(msg));
        if self.model.n_bath != 2 {
            return bad(format!(
                "Bell targets need exactly two bath spins, got {}",
                self.model.n_bath
            ));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must lie in (0, 1), got {}", self.theta));
        }
        if self.max_steps < 1 {
            return bad("max_steps must be at least 1".into());
        }
        if !(self.r_plus.is_finite() && self.r_minus.is_finite() && self.r_fatal.is_finite()) {
            return bad("rewards must be finite".into());
        }
        if self.r_fatal > self.r_minus * self.max_steps as f64 {
            return bad(format!(
                "r_fatal = {} exceeds r_minus * max_steps = {}",
                self.r_fatal,
                self.r_minus * self.max_steps as f64
            ));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1.0) {
            return bad(format!("prob_floor must lie in (0, 1), got {}", self.prob_floor));
        }
        if let StartMode::FixedCustom { theta, phi } = self.start_mode {
            if !(theta.is_finite() && phi.is_finite()) {
                return bad("custom start angles must be finite".into());
            }
        }
        Ok(())
    }
}

/// Number of reals in the encoding of a `dim`-dimensional density matrix.
pub fn encoding_len(dim: usize) -> usize {
    2 * (dim * (dim + 1) / 2 - 1)
}

/// Upper triangle (diagonal included) in row-major order, minus the last
/// diagonal entry, as interleaved (re, im) pairs.
pub fn encode_state(rho: &DensityMatrix) -> Vec<f64> {
    let m = rho.matrix();
    let n = m.rows();
    let mut out = Vec::with_capacity(encoding_len(n));
    for i in 0..n {
        for j in i..n {
            if i == n - 1 && j == n - 1 {
                continue;
            }
            let z = m[(i, j)];
            out.push(z.re);
            out.push(z.im);
        }
    }
    out
}

/// Inverse of [`encode_state`], completing the matrix by Hermiticity and unit trace.
pub fn decode_state(encoding: &[f64], dim: usize) -> Result<DensityMatrix, EnvError> {
    let expected = encoding_len(dim);
    if encoding.len() != expected {
        return Err(EnvError::EncodingLength {
            got: encoding.len(),
            expected,
        });
    }
    let mut m = ComplexMatrix::zeros(dim, dim);
    let mut pairs = encoding.chunks_exact(2);
    let mut diag_sum = 0.0;
    for i in 0..dim {
        for j in i..dim {
            if i == dim - 1 && j == dim - 1 {
                continue;
            }
            let pair = pairs.next().expect("length checked above");
            let z = C64::new(pair[0], pair[1]);
            m[(i, j)] = z;
            m[(j, i)] = z.conj();
            if i == j {
                diag_sum += z.re;
            }
        }
    }
    m[(dim - 1, dim - 1)] = C64::new(1.0 - diag_sum, 0.0);
    Ok(DensityMatrix::new_unchecked(m))
}

/// G = Σ_i γ^i r_{i+1}.
pub fn episode_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards
        .iter()
        .rev()
        .fold(0.0, |acc, &r| r + gamma * acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub encoding: Vec<f64>,
    pub rho: DensityMatrix,
    /// Steps taken so far, m_e.
    pub step_count: usize,
    pub done: bool,
}

impl EnvState {
    pub fn new(rho: DensityMatrix, step_count: usize, done: bool) -> Self {
        Self {
            encoding: encode_state(&rho),
            rho,
            step_count,
            done,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Continue,
    Timeout,
    Fatal,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
    /// Probability of the selected measurement branch, 1 for the identity.
    pub success_prob: f64,
    /// Fidelity of the bath state to the target, 0 on a fatal step.
    pub fidelity: f64,
    pub outcome: Outcome,
}

/// Environment with its propagator and projectors precomputed. Immutable and
/// shareable between threads; randomness comes from the caller.
#[derive(Debug, Clone)]
pub struct QseEnv {
    cfg: EnvConfig,
    propagator: ComplexMatrix,
    projectors: Vec<CentralProjector>,
    target: ComplexMatrix,
}

impl QseEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let propagator = model::build_propagator(&cfg.model, cfg.model.tau)?;
        let projectors = Action::all()
            .filter_map(Action::projection)
            .map(|(axis, sign)| CentralProjector::new(axis, sign, cfg.model.n_bath))
            .collect();
        let target = bell_state(cfg.target);
        Ok(Self {
            cfg,
            propagator,
            projectors,
            target,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn propagator(&self) -> &ComplexMatrix {
        &self.propagator
    }

    pub fn target_ket(&self) -> &ComplexMatrix {
        &self.target
    }

    pub fn encoding_len(&self) -> usize {
        encoding_len(self.cfg.model.dim())
    }

    /// Projector for `action`, `None` for the identity.
    pub fn projector(&self, action: Action) -> Option<&CentralProjector> {
        self.projectors.get(action.index())
    }

    /// Resolves the configured start mode into a concrete fixed start,
    /// drawing a Haar-random central state for `RandomPure`.
    pub fn draw_start<R: Rng + ?Sized>(&self, rng: &mut R) -> StartMode {
        match self.cfg.start_mode {
            StartMode::RandomPure => {
                let mut draw = || -> f64 { rng.sample(StandardNormal) };
                let a = C64::new(draw(), draw());
                let b = C64::new(draw(), draw());
                StartMode::FixedCustom {
                    theta: 2.0 * b.norm().atan2(a.norm()),
                    phi: b.arg() - a.arg(),
                }
            }
            fixed => fixed,
        }
    }

    /// Central spin in the given fixed state, bath maximally mixed. A
    /// `RandomPure` mode is treated as |x+⟩; resolve it with [`QseEnv::draw_start`].
    pub fn start_state(&self, mode: StartMode) -> DensityMatrix {
        let ket = match mode {
            StartMode::FixedXplus | StartMode::RandomPure => model::spin_ket(Axis::X, Sign::Plus),
            StartMode::FixedCustom { theta, phi } => bloch_ket(theta, phi),
        };
        let central = DensityMatrix::new_unchecked(ComplexMatrix::outer(&ket));
        central.kron(&DensityMatrix::maximally_mixed(self.cfg.model.bath_dim()))
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let start = self.draw_start(rng);
        EnvState::new(self.start_state(start), 0, false)
    }

    /// Fidelity of the bath part of `rho` to the target state.
    pub fn bath_fidelity(&self, rho: &DensityMatrix) -> f64 {
        let bath = rho
            .trace_out_first(2)
            .expect("state dimension is a multiple of two");
        model::fidelity_pure(&self.target, &bath)
    }

    /// Free evolution for τ followed by `action`, ignoring episode bookkeeping.
    /// Returns the new state and the branch probability.
    pub fn apply(
        &self,
        rho: &DensityMatrix,
        action: Action,
    ) -> Result<(DensityMatrix, f64), ModelError> {
        let evolved = model::evolve(rho, &self.propagator)?;
        match self.projector(action) {
            None => Ok((evolved, 1.0)),
            Some(p) => model::measure(&evolved, p, self.cfg.prob_floor),
        }
    }

    pub fn step(&self, state: &EnvState, action: Action) -> Result<StepResult, EnvError> {
        if state.done {
            return Err(EnvError::EpisodeFinished);
        }
        let step_count = state.step_count + 1;
        match self.apply(&state.rho, action) {
            Err(ModelError::NormalizationUnderflow { prob, .. }) => {
                let evolved = model::evolve(&state.rho, &self.propagator)?;
                Ok(StepResult {
                    next: EnvState::new(evolved, step_count, true),
                    reward: self.cfg.r_fatal,
                    done: true,
                    success_prob: prob.max(0.0),
                    fidelity: 0.0,
                    outcome: Outcome::Fatal,
                })
            }
            Err(e) => Err(e.into()),
            Ok((rho, success_prob)) => {
                let fidelity = self.bath_fidelity(&rho);
                let (reward, outcome) = if fidelity > self.cfg.theta {
                    (self.cfg.r_plus, Outcome::Success)
                } else if step_count < self.cfg.max_steps {
                    (self.cfg.r_minus, Outcome::Continue)
                } else {
                    (self.cfg.r_minus, Outcome::Timeout)
                };
                let done = outcome != Outcome::Continue;
                Ok(StepResult {
                    next: EnvState::new(rho, step_count, done),
                    reward,
                    done,
                    success_prob,
                    fidelity,
                    outcome,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fidelity, purity};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn env(cfg: EnvConfig) -> QseEnv {
        QseEnv::new(cfg).unwrap()
    }

    #[test]
    fn action_table() {
        assert_eq!(Action::all().count(), 7);
        assert!(Action::new(6).unwrap().is_noop());
        assert!(Action::new(7).is_none());
        assert_eq!(Action::PX_PLUS.projection(), Some((Axis::X, Sign::Plus)));
        assert_eq!(Action::PY_MINUS.projection(), Some((Axis::Y, Sign::Minus)));
        assert_eq!(Action::NOOP.projection(), None);
        for a in Action::all() {
            assert_eq!(a.name().parse::<Action>().unwrap(), a);
        }
        assert_eq!("P_{x+}".parse::<Action>().unwrap(), Action::PX_PLUS);
        assert_eq!("-".parse::<Action>().unwrap(), Action::NOOP);
        assert!("Pw+".parse::<Action>().is_err());
    }

    #[test]
    fn fixed_reset() {
        let e = env(EnvConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = e.reset(&mut rng);
        assert_eq!(s.step_count, 0);
        assert!((s.rho.matrix().trace().re - 1.0).abs() < 1e-15);
        assert!((purity(&s.rho) - 0.25).abs() < 1e-15);
        // central spin reduced state, tracing out the bath
        let mut central = ComplexMatrix::zeros(2, 2);
        for a in 0..2 {
            for b in 0..2 {
                for k in 0..4 {
                    central[(a, b)] += s.rho.matrix()[(a * 4 + k, b * 4 + k)];
                }
            }
        }
        let xplus = ComplexMatrix::outer(&model::spin_ket(Axis::X, Sign::Plus));
        assert!(central.distance(&xplus) < 1e-15);
    }

    #[test]
    fn named_starts_match_axis_kets() {
        let e = env(EnvConfig::default());
        for (name, axis, sign) in [
            ("x-", Axis::X, Sign::Minus),
            ("y+", Axis::Y, Sign::Plus),
            ("y-", Axis::Y, Sign::Minus),
            ("z-", Axis::Z, Sign::Minus),
        ] {
            let rho = e.start_state(StartMode::named(name).unwrap());
            let expected = DensityMatrix::pure(&model::spin_ket(axis, sign))
                .unwrap()
                .kron(&DensityMatrix::maximally_mixed(4));
            assert!(rho.matrix().distance(expected.matrix()) < 1e-15, "{name}");
        }
    }

    #[test]
    fn random_reset_reproducible_and_haar_averaged() {
        let e = env(EnvConfig::random_start(Bell::PsiMinus, 50));
        let a = e.reset(&mut ChaCha8Rng::seed_from_u64(17));
        let b = e.reset(&mut ChaCha8Rng::seed_from_u64(17));
        assert_eq!(a.rho, b.rho);

        // Haar average of |ψ⟩⟨ψ| is I/2.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut avg = ComplexMatrix::zeros(2, 2);
        let samples = 10_000;
        for _ in 0..samples {
            let s = e.reset(&mut rng);
            s.rho.validate().unwrap();
            for a in 0..2 {
                for b in 0..2 {
                    for k in 0..4 {
                        avg[(a, b)] += s.rho.matrix()[(a * 4 + k, b * 4 + k)];
                    }
                }
            }
        }
        let avg = avg.scale_real(1.0 / samples as f64);
        let half = ComplexMatrix::identity(2).scale_real(0.5);
        for i in 0..2 {
            for j in 0..2 {
                assert!((avg[(i, j)] - half[(i, j)]).norm() < 0.02);
            }
        }
    }

    #[test]
    fn encode_mixed_state() {
        let enc = encode_state(&DensityMatrix::maximally_mixed(8));
        assert_eq!(enc.len(), 70);
        assert_eq!(encoding_len(8), 70);
        let mut diag_positions = Vec::new();
        let mut k = 0;
        for i in 0..8 {
            for j in i..8 {
                if i == 7 && j == 7 {
                    continue;
                }
                if i == j {
                    diag_positions.push(2 * k);
                }
                k += 1;
            }
        }
        for (idx, &v) in enc.iter().enumerate() {
            let expected = if diag_positions.contains(&idx) { 0.125 } else { 0.0 };
            assert_eq!(v, expected, "index {idx}");
        }
        assert_eq!(diag_positions.len(), 7);
    }

    #[test]
    fn decode_rejects_wrong_length() {
        assert!(matches!(
            decode_state(&[0.0; 69], 8),
            Err(EnvError::EncodingLength { .. })
        ));
    }

    fn random_state(seed: u64) -> DensityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..64)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let a = ComplexMatrix::from_vec(8, 8, data);
        let m = a.matmul_adjoint(&a);
        let tr = m.trace().re;
        DensityMatrix::new_unchecked(m.scale_real(1.0 / tr))
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(seed in any::<u64>()) {
            let rho = random_state(seed);
            let back = decode_state(&encode_state(&rho), 8).unwrap();
            prop_assert!(back.matrix().distance(rho.matrix()) < 1e-12);
        }

        #[test]
        fn noop_never_fatal(seed in any::<u64>(), steps in 1usize..8) {
            let e = env(EnvConfig::default());
            let mut state = EnvState::new(random_state(seed), 0, false);
            for _ in 0..steps {
                let r = e.step(&state, Action::NOOP).unwrap();
                prop_assert!(r.outcome != Outcome::Fatal);
                prop_assert_eq!(r.success_prob, 1.0);
                if r.done { break; }
                state = r.next;
            }
        }
    }

    #[test]
    fn episode_return_examples() {
        assert_eq!(episode_return(&[10.0], 0.3), 10.0);
        assert_eq!(episode_return(&[-1.0, -1.0, 10.0], 1.0), 8.0);
        assert!((episode_return(&[-1.0, 10.0], 0.9) - 8.0).abs() < 1e-12);
        assert_eq!(episode_return(&[], 0.9), 0.0);
    }

    #[test]
    fn reward_cases() {
        let e = env(EnvConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s0 = e.reset(&mut rng);

        // continue
        let r = e.step(&s0, Action::NOOP).unwrap();
        assert_eq!((r.reward, r.done, r.outcome), (-1.0, false, Outcome::Continue));
        assert_eq!(r.next.step_count, 1);

        // success on the last step of noop, Px+ ×5
        let mut s = r.next;
        let mut last = None;
        for _ in 0..5 {
            let r = e.step(&s, Action::PX_PLUS).unwrap();
            s = r.next.clone();
            last = Some(r);
        }
        let last = last.unwrap();
        assert_eq!(last.outcome, Outcome::Success);
        assert_eq!(last.reward, 10.0);
        assert!(last.done && last.fidelity > 0.99);
        assert!(matches!(e.step(&s, Action::NOOP), Err(EnvError::EpisodeFinished)));

        // fatal: Pz+ then Pz− (central z is conserved by the dynamics)
        let r = e.step(&s0, Action::PZ_PLUS).unwrap();
        let fatal = e.step(&r.next, Action::PZ_MINUS).unwrap();
        assert_eq!(fatal.outcome, Outcome::Fatal);
        assert_eq!(fatal.reward, -51.0);
        assert!(fatal.done);
        assert!(fatal.success_prob <= 1e-8);
    }

    #[test]
    fn timeout_on_last_step() {
        let mut cfg = EnvConfig::fixed_start(Bell::PhiPlus, 3);
        cfg.r_fatal = -4.0;
        let e = env(cfg);
        let mut s = e.reset(&mut ChaCha8Rng::seed_from_u64(0));
        let mut outcomes = Vec::new();
        loop {
            let r = e.step(&s, Action::NOOP).unwrap();
            outcomes.push(r.outcome);
            if r.done {
                break;
            }
            s = r.next;
        }
        assert_eq!(
            outcomes,
            vec![Outcome::Continue, Outcome::Continue, Outcome::Timeout]
        );
    }

    #[test]
    fn hot_path_fidelity_matches_general_formula() {
        let e = env(EnvConfig::default());
        let mut s = e.reset(&mut ChaCha8Rng::seed_from_u64(0));
        let target = DensityMatrix::pure(e.target_ket()).unwrap();
        for a in [Action::NOOP, Action::PX_PLUS, Action::PY_MINUS, Action::PX_PLUS] {
            let r = e.step(&s, a).unwrap();
            let bath = r.next.rho.trace_out_first(2).unwrap();
            let general = fidelity(&bath, &target).unwrap();
            assert!((general - r.fidelity).abs() < 1e-8);
            s = r.next;
        }
    }

    #[test]
    fn markov_in_encoding() {
        let e = env(EnvConfig::default());
        let s = e.reset(&mut ChaCha8Rng::seed_from_u64(0));
        let r1 = e.step(&s, Action::NOOP).unwrap();
        let r1 = e.step(&r1.next, Action::PX_PLUS).unwrap();
        let rebuilt = EnvState::new(decode_state(&r1.next.encoding, 8).unwrap(), 2, false);
        let a = e.step(&r1.next, Action::PY_PLUS).unwrap();
        let b = e.step(&rebuilt, Action::PY_PLUS).unwrap();
        assert_eq!(a.reward, b.reward);
        for (x, y) in a.next.encoding.iter().zip(&b.next.encoding) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = EnvConfig::default();
        cfg.validate().unwrap();
        cfg.theta = 1.5;
        assert!(cfg.validate().is_err());
        for cfg in [
            EnvConfig { r_fatal: -10.0, ..EnvConfig::default() },
            EnvConfig { max_steps: 0, ..EnvConfig::default() },
            EnvConfig { model: ModelParams::linear_chain(4, 0.5, 1.0), ..EnvConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
