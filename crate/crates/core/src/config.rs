//! Experiment configuration, read from TOML.
//!
//! Every table is optional; a missing key takes the library default. A
//! minimal file is an empty file.
//!
//! ```toml
//! name = "collapse"
//! output_dir = "runs"
//!
//! [env]
//! preset = "standard"       # or "hackable"
//!
//! [reward]
//! variant = "two_term"      # or "three_term"
//! lambda = [0.6, 0.4]
//!
//! [grpo]
//! steps = 300
//!
//! [dpo]
//! init = "grpo"
//!
//! [judge]
//! kind = "oracle"           # or "service"
//! ```
//!
//! `PROSODY_LAB_HOST`, `PROSODY_LAB_PORT` and `PROSODY_LAB_OUTPUT` override
//! `service.host`, `service.port` and `output_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::OracleConfig;
use crate::dpo::DpoConfig;
use crate::elo::EloConfig;
use crate::eval::EvalSpec;
use crate::grpo::{GrpoConfig, RewardSpec};
use crate::reward::{RewardWeights, Temperatures, DEFAULT_SIM_FLOOR};
use crate::scenario::EnvSpec;

pub const ENV_HOST: &str = "PROSODY_LAB_HOST";
pub const ENV_PORT: &str = "PROSODY_LAB_PORT";
pub const ENV_OUTPUT: &str = "PROSODY_LAB_OUTPUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("{key} references {path}, which does not exist")]
    MissingPath { key: &'static str, path: PathBuf },
    #[error("environment override {var}={value:?}: {reason}")]
    EnvOverride { var: &'static str, value: String, reason: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvPreset {
    #[default]
    Standard,
    Hackable,
}

/// Environment preset plus the few knobs worth overriding per experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub preset: EnvPreset,
    pub max_len: Option<usize>,
    pub n_prompts: Option<usize>,
    pub n_heldout: Option<usize>,
    pub seed: Option<u64>,
}

impl EnvSection {
    pub fn spec(&self) -> EnvSpec {
        let mut s = match self.preset {
            EnvPreset::Standard => EnvSpec::default(),
            EnvPreset::Hackable => EnvSpec::hackable(),
        };
        if let Some(v) = self.max_len {
            s.max_len = v;
        }
        if let Some(v) = self.n_prompts {
            s.n_prompts = v;
        }
        if let Some(v) = self.n_heldout {
            s.n_heldout = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    #[default]
    TwoTerm,
    ThreeTerm,
}

/// Named reward settings selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RewardPreset {
    Clean,
    Sim,
}

impl RewardPreset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Sim => "sim",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub variant: RewardVariant,
    /// `[λ_c, λ_ℓ]` or `[λ_c, λ_ℓ, λ_s]`, matching `variant`.
    pub lambda: Vec<f64>,
    pub tau_c: f64,
    pub tau_ell: f64,
    pub sim_floor: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self::preset(RewardPreset::Clean)
    }
}

impl RewardSection {
    pub fn preset(p: RewardPreset) -> Self {
        let t = Temperatures::default();
        let (variant, lambda) = match p {
            RewardPreset::Clean => (RewardVariant::TwoTerm, vec![0.6, 0.4]),
            RewardPreset::Sim => (RewardVariant::ThreeTerm, vec![0.5, 0.3, 0.2]),
        };
        Self {
            variant,
            lambda,
            tau_c: t.tau_c,
            tau_ell: t.tau_ell,
            sim_floor: DEFAULT_SIM_FLOOR,
        }
    }

    /// Same temperatures and floor, with the preset's variant and weights.
    pub fn with_preset(&self, p: RewardPreset) -> Self {
        let named = Self::preset(p);
        Self {
            variant: named.variant,
            lambda: named.lambda,
            ..self.clone()
        }
    }

    pub fn spec(&self) -> Result<RewardSpec> {
        let invalid = |e: crate::reward::RewardError| ConfigError::Invalid(format!("reward: {e}"));
        let weights = match (self.variant, self.lambda.as_slice()) {
            (RewardVariant::TwoTerm, &[c, l]) => RewardWeights::two_term(c, l).map_err(invalid)?,
            (RewardVariant::ThreeTerm, &[c, l, s]) => RewardWeights::three_term(c, l, s).map_err(invalid)?,
            (v, lambda) => {
                return Err(ConfigError::Invalid(format!(
                    "reward: variant {v:?} takes {} weights, got {}",
                    if v == RewardVariant::TwoTerm { 2 } else { 3 },
                    lambda.len()
                )))
            }
        };
        let spec = RewardSpec {
            weights,
            temps: Temperatures {
                tau_c: self.tau_c,
                tau_ell: self.tau_ell,
            },
            sim_floor: self.sim_floor,
        };
        spec.validate().map_err(|e| ConfigError::Invalid(format!("reward: {e}")))?;
        Ok(spec)
    }
}

/// GRPO settings; the reward comes from `[reward]` and `max_len` from `[env]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoSection {
    pub group_size: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub adv_std_floor: f64,
    pub steps: usize,
    pub prompts_per_step: usize,
    pub temperature: f64,
    pub inner_epochs: usize,
    pub kl_coef: f64,
    pub seed: u64,
}

impl Default for GrpoSection {
    fn default() -> Self {
        let d = GrpoConfig::default();
        Self {
            group_size: d.group_size,
            learning_rate: d.learning_rate,
            clip_epsilon: d.clip_epsilon,
            adv_std_floor: d.adv_std_floor,
            steps: d.steps,
            prompts_per_step: d.prompts_per_step,
            temperature: d.temperature,
            inner_epochs: d.inner_epochs,
            kl_coef: d.kl_coef,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    Oracle,
    Service,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub host: String,
    pub port: u16,
    /// Queue directory; relative paths resolve against `output_dir`.
    pub root: PathBuf,
    /// Side-assignment seed for queued tasks.
    pub seed: u64,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8750,
            root: PathBuf::from("service"),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeSection {
    pub kind: JudgeKind,
    pub oracle: OracleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    /// Checkpoint that scores NLL; the environment's base checkpoint if unset.
    pub scorer_checkpoint: Option<PathBuf>,
    pub env: EnvSection,
    pub reward: RewardSection,
    pub grpo: GrpoSection,
    pub dpo: DpoConfig,
    pub judge: JudgeSection,
    pub elo: EloConfig,
    pub eval: EvalSpec,
    pub service: ServiceSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            output_dir: PathBuf::from("runs"),
            scorer_checkpoint: None,
            env: EnvSection::default(),
            reward: RewardSection::default(),
            grpo: GrpoSection::default(),
            dpo: DpoConfig::default(),
            judge: JudgeSection::default(),
            elo: EloConfig::default(),
            eval: EvalSpec::default(),
            service: ServiceSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads, applies process environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(h) = lookup(ENV_HOST) {
            self.service.host = h;
        }
        if let Some(p) = lookup(ENV_PORT) {
            self.service.port = p.parse().map_err(|e: std::num::ParseIntError| ConfigError::EnvOverride {
                var: ENV_PORT,
                value: p.clone(),
                reason: e.to_string(),
            })?;
        }
        if let Some(o) = lookup(ENV_OUTPUT) {
            self.output_dir = PathBuf::from(o);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |section: &str, e: &dyn std::fmt::Display| ConfigError::Invalid(format!("{section}: {e}"));
        self.reward.spec()?;
        self.env.spec().validate().map_err(|e| invalid("env", &e))?;
        self.grpo_config()?.validate().map_err(|e| invalid("grpo", &e))?;
        self.dpo.validate().map_err(|e| invalid("dpo", &e))?;
        self.judge.oracle.validate().map_err(|e| invalid("judge.oracle", &e))?;
        self.elo.validate().map_err(|e| invalid("elo", &e))?;
        if self.eval.samples_per_prompt == 0 || !(self.eval.temperature > 0.0) || self.eval.max_len == 0 {
            return Err(ConfigError::Invalid(
                "eval: samples_per_prompt and max_len must be >= 1 and temperature positive".into(),
            ));
        }
        if let Some(p) = &self.scorer_checkpoint {
            if !p.exists() {
                return Err(ConfigError::MissingPath {
                    key: "scorer_checkpoint",
                    path: p.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn grpo_config(&self) -> Result<GrpoConfig> {
        let g = &self.grpo;
        Ok(GrpoConfig {
            group_size: g.group_size,
            learning_rate: g.learning_rate,
            clip_epsilon: g.clip_epsilon,
            adv_std_floor: g.adv_std_floor,
            steps: g.steps,
            prompts_per_step: g.prompts_per_step,
            reward: self.reward.spec()?,
            max_len: self.env.spec().max_len,
            temperature: g.temperature,
            inner_epochs: g.inner_epochs,
            kl_coef: g.kl_coef,
            seed: g.seed,
        })
    }

    pub fn service_root(&self) -> PathBuf {
        if self.service.root.is_absolute() {
            self.service.root.clone()
        } else {
            self.output_dir.join(&self.service.root)
        }
    }
}
