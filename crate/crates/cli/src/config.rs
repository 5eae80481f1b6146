//! Run configuration files.
//!
//! A run file is TOML with top-level run keys and one section per component:
//! `[model]`, `[env]`, `[agent]`, `[mlp]` and an optional `[evaluation]`.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use qse_core::agent::AgentConfig;
use qse_core::env::{EnvConfig, QseEnv, StartMode};
use qse_core::model::{Bell, ModelParams};
use qse_core::nn::{Activation, MlpSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Overrides the directory that relative `output_dir` values resolve against.
pub const OUTPUT_ROOT_VAR: &str = "QSE_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub target: Bell,
    pub theta: f64,
    pub r_plus: f64,
    pub r_minus: f64,
    pub r_fatal: f64,
    pub max_steps: usize,
    pub start_mode: StartMode,
    #[serde(default = "default_floor")]
    pub prob_floor: f64,
}

fn default_floor() -> f64 {
    qse_core::model::DEFAULT_PROB_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub eps: f64,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            eps: 0.1,
            episodes: 500,
            seed: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub checkpoint_steps: Vec<u64>,
    pub model: ModelParams,
    pub env: EnvSection,
    pub agent: AgentConfig,
    pub mlp: MlpSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

impl RunConfig {
    /// Fixed |x+⟩ start with the usual rewards and a small default network.
    pub fn fixed_start(target: Bell, max_steps: usize, training_steps: u64) -> Self {
        let env = EnvConfig::fixed_start(target, max_steps);
        Self {
            master_seed: 1,
            output_dir: PathBuf::from(format!("runs/{}", target_slug(target))),
            checkpoint_steps: Vec::new(),
            model: env.model.clone(),
            env: EnvSection::from_env(&env),
            agent: AgentConfig::with_training_steps(training_steps),
            mlp: MlpSection {
                hidden: vec![128, 128],
                activation: Activation::Relu,
                init_seed: 7,
            },
            evaluation: EvaluationSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            model: self.model.clone(),
            target: self.env.target,
            theta: self.env.theta,
            r_plus: self.env.r_plus,
            r_minus: self.env.r_minus,
            r_fatal: self.env.r_fatal,
            max_steps: self.env.max_steps,
            start_mode: self.env.start_mode,
            prob_floor: self.env.prob_floor,
        }
    }

    pub fn build_env(&self) -> Result<QseEnv, CliError> {
        QseEnv::new(self.env_config()).map_err(|e| CliError::Config(format!("[env] {e}")))
    }

    pub fn mlp_spec(&self) -> MlpSpec {
        MlpSpec {
            input_size: qse_core::env::encoding_len(self.model.dim()),
            hidden: self.mlp.hidden.clone(),
            output_size: qse_core::env::Action::COUNT,
            activation: self.mlp.activation,
            init_seed: self.mlp.init_seed,
        }
    }

    /// Checks every section; messages name the offending section.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model
            .validate()
            .map_err(|e| CliError::Config(format!("[model] {e}")))?;
        self.env_config()
            .validate()
            .map_err(|e| CliError::Config(format!("[env] {e}")))?;
        self.agent
            .validate()
            .map_err(|e| CliError::Config(format!("[agent] {e}")))?;
        self.mlp_spec()
            .validate()
            .map_err(|e| CliError::Config(format!("[mlp] {e}")))?;
        let ev = &self.evaluation;
        if !(0.0..=1.0).contains(&ev.eps) || ev.episodes == 0 {
            return Err(CliError::Config(
                "[evaluation] eps must lie in [0, 1] and episodes must be positive".into(),
            ));
        }
        if let Some(s) = self
            .checkpoint_steps
            .iter()
            .find(|&&s| s == 0 || s > self.agent.training_steps)
        {
            return Err(CliError::Config(format!(
                "checkpoint_steps: step {s} is outside 1..={}",
                self.agent.training_steps
            )));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// `output_dir`, resolved against `$QSE_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

impl EnvSection {
    pub fn from_env(env: &EnvConfig) -> Self {
        Self {
            target: env.target,
            theta: env.theta,
            r_plus: env.r_plus,
            r_minus: env.r_minus,
            r_fatal: env.r_fatal,
            max_steps: env.max_steps,
            start_mode: env.start_mode,
            prob_floor: env.prob_floor,
        }
    }
}

fn target_slug(target: Bell) -> &'static str {
    match target {
        Bell::PhiPlus => "phi_plus",
        Bell::PhiMinus => "phi_minus",
        Bell::PsiPlus => "psi_plus",
        Bell::PsiMinus => "psi_minus",
    }
}

/// The configuration files shipped in `configs/`, by file stem.
pub const BUNDLED: [(&str, &str); 5] = [
    ("psi_minus_fixed", include_str!("../configs/psi_minus_fixed.cfg")),
    ("psi_plus_fixed", include_str!("../configs/psi_plus_fixed.cfg")),
    ("phi_plus_fixed", include_str!("../configs/phi_plus_fixed.cfg")),
    ("phi_minus_fixed", include_str!("../configs/phi_minus_fixed.cfg")),
    ("psi_minus_random", include_str!("../configs/psi_minus_random.cfg")),
];

pub fn bundled(name: &str) -> Result<RunConfig, CliError> {
    let text = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| CliError::Config(format!("no bundled config named '{name}'")))?;
    RunConfig::parse(text)
}
