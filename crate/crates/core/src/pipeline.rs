//! The experiment commands as library calls: each takes a validated config
//! and writes a run directory with a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotator::{JudgeError, Judgment, Oracle, PreferenceJudge};
use crate::config::{ConfigError, ExperimentConfig, JudgeKind, RewardPreset};
use crate::derive_seed;
use crate::dpo::{self, DpoError, DpoInit, RoundReport, RoundState};
use crate::elo::{VoteRecord, Winner, VOTE_SCHEMA_VERSION};
use crate::env::{self, EnvError, Prompt};
use crate::eval::{self, EvalSummary};
use crate::grpo::{self, GrpoError};
use crate::policy::{read_checkpoint, write_checkpoint, PolicyError, PolicyParams};
use crate::scenario::{Scenario, ScenarioError};
use crate::service::{self, NewTask, ServiceError, Store};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Dpo(#[from] DpoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Elo(#[from] crate::elo::EloError),
    #[error("{path}: {reason}")]
    Artifact { path: PathBuf, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// What a run directory contains and how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub name: String,
    pub code_version: String,
    /// The effective configuration, as TOML.
    pub config: String,
    /// System name → checkpoint path relative to the run directory.
    pub checkpoints: BTreeMap<String, PathBuf>,
    /// Artifact path relative to the run directory → sha256.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            name: cfg.name.clone(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.to_toml(),
            checkpoints: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Hashes `files` (relative to `dir`) and writes the manifest there.
    pub fn write(mut self, dir: &Path, files: &[&str]) -> Result<Self> {
        for f in files {
            let bytes = fs::read(dir.join(f))?;
            self.artifacts.insert((*f).to_owned(), hex(&Sha256::digest(&bytes)));
        }
        let json = serde_json::to_string_pretty(&self).map_err(std::io::Error::from)?;
        fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::Artifact {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
            path,
            reason: e.to_string(),
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn scenario(cfg: &ExperimentConfig) -> Result<Scenario> {
    Ok(Scenario::build(&cfg.env.spec())?)
}

/// The NLL scorer: the configured checkpoint, or the environment's base.
pub fn scorer(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<PolicyParams> {
    match &cfg.scorer_checkpoint {
        Some(p) => Ok(read_checkpoint(p)?),
        None => Ok(scenario.base.clone()),
    }
}

/// Display name of a GRPO checkpoint.
pub fn grpo_version(preset: RewardPreset) -> String {
    format!("grpo-{}", preset.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoRun {
    pub version: String,
    pub checkpoint_hash: String,
    pub before: EvalSummary,
    pub after: EvalSummary,
}

/// Trains GRPO from the base checkpoint and writes `policy.ckpt`,
/// `train_log.csv`, `hist_start.csv`, `hist_end.csv`, `eval.json` and the
/// manifest into `dir`.
///
/// `preset` replaces the configured reward weights; `None` keeps them.
pub fn train_grpo_run(cfg: &ExperimentConfig, preset: Option<RewardPreset>, dir: &Path) -> Result<GrpoRun> {
    let mut cfg = cfg.clone();
    if let Some(p) = preset {
        cfg.reward = cfg.reward.with_preset(p);
    }
    cfg.validate()?;
    let s = scenario(&cfg)?;
    let scorer = scorer(&cfg, &s)?;
    let gcfg = cfg.grpo_config()?;
    let version = match preset {
        Some(p) => grpo_version(p),
        None if gcfg.reward.weights.uses_similarity() => grpo_version(RewardPreset::Sim),
        None => grpo_version(RewardPreset::Clean),
    };
    let (trained, log) = grpo::train_grpo(&s.base, s.train.as_slice(), &s.vocab, &gcfg, &scorer, |_| {})?;
    let trained = trained.with_version(version.clone());

    fs::create_dir_all(dir)?;
    write_checkpoint(&dir.join(CHECKPOINT_FILE), &trained)?;
    fs::write(dir.join("train_log.csv"), log.to_csv())?;
    let held = s.heldout.as_slice();
    let start = eval::sample_pool(&s.base, held, &cfg.eval)?;
    let end = eval::sample_pool(&trained, held, &cfg.eval)?;
    fs::write(dir.join("hist_start.csv"), env::pitch_histogram_csv(&start, &s.vocab)?)?;
    fs::write(dir.join("hist_end.csv"), env::pitch_histogram_csv(&end, &s.vocab)?)?;
    let run = GrpoRun {
        version: version.clone(),
        checkpoint_hash: trained.hash(),
        before: eval::summarize(&start, held, &s.vocab)?,
        after: eval::summarize(&end, held, &s.vocab)?,
    };
    write_json(&dir.join("eval.json"), &run)?;
    let mut m = RunManifest::new("train-grpo", &cfg);
    m.checkpoints.insert(version, CHECKPOINT_FILE.into());
    m.write(
        dir,
        &[CHECKPOINT_FILE, "train_log.csv", "hist_start.csv", "hist_end.csv", "eval.json"],
    )?;
    Ok(run)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(std::io::Error::from)?;
    fs::write(path, json + "\n")?;
    Ok(())
}

/// Where `dpo.init = "grpo"` looks for its starting checkpoint when none is
/// given: the clean GRPO run under the output directory.
pub fn default_grpo_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(grpo_version(RewardPreset::Clean)).join(CHECKPOINT_FILE)
}

/// Where a DPO run stands.
#[derive(Debug, Clone, PartialEq)]
pub enum DpoStatus {
    Complete(Vec<RoundReport>),
    /// A human round is queued and still collecting votes; rerun to resume.
    Waiting {
        round: u32,
        missing: usize,
        total: usize,
        finished: Vec<RoundReport>,
    },
}

/// Draws distinct, voiced candidate pairs for human labeling, using the same
/// draw scheme as oracle pair collection.
pub fn sample_tasks(
    policy: &PolicyParams,
    prompts: &[Prompt],
    n: usize,
    round: u32,
    sampler: &dpo::SamplerConfig,
    seed: u64,
) -> Result<Vec<NewTask>> {
    let budget = n.saturating_mul(sampler.max_attempts_per_pair);
    let mut out = Vec::with_capacity(n);
    let mut draw = 0usize;
    while out.len() < n && draw < budget {
        let d = draw as u64;
        let prompt = &prompts[draw % prompts.len()];
        draw += 1;
        let sample = |k: u64| {
            policy.sample(
                prompt,
                sampler.temperature,
                sampler.max_len,
                derive_seed(seed, &[u64::from(round), d, k]),
            )
        };
        let (a, b) = (sample(0)?, sample(1)?);
        if a.token_ids == b.token_ids || a.voiced_len() == 0 || b.voiced_len() == 0 {
            continue;
        }
        out.push(NewTask {
            prompt: prompt.clone(),
            first: a,
            second: b,
            first_system: policy.version().to_owned(),
            second_system: policy.version().to_owned(),
        });
    }
    if out.len() < n {
        return Err(DpoError::IncompleteRound {
            round,
            missing: n - out.len(),
            wanted: n,
        }
        .into());
    }
    Ok(out)
}

/// Seed of the pair sampler for every round of a DPO run.
pub fn pair_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.dpo.seed, &[0x9a12])
}

/// Runs (or resumes) `cfg.dpo.rounds` DPO rounds in `dir`.
///
/// A round whose checkpoint and consumed marker exist is skipped. With the
/// service judge, a round's pairs are queued under the service root and the
/// run stops with [`DpoStatus::Waiting`] until every task has a vote.
pub fn dpo_rounds_run(cfg: &ExperimentConfig, judge: JudgeKind, init: Option<PolicyParams>, dir: &Path) -> Result<DpoStatus> {
    cfg.validate()?;
    let s = scenario(cfg)?;
    let mut current = match (init, cfg.dpo.init) {
        (Some(p), _) => p,
        (None, DpoInit::Base) => s.base.clone(),
        (None, DpoInit::Grpo) => {
            let path = default_grpo_checkpoint(cfg);
            if !path.exists() {
                return Err(ConfigError::MissingPath {
                    key: "dpo.init = \"grpo\"",
                    path,
                }
                .into());
            }
            read_checkpoint(&path)?
        }
    };
    fs::create_dir_all(dir)?;
    let mut reports = Vec::new();
    let mut files: Vec<String> = Vec::new();
    let mut manifest = RunManifest::new("dpo-rounds", cfg);
    for round in 1..=cfg.dpo.rounds {
        let (pairs_path, ckpt_path) = dpo::round_paths(dir, round);
        let marker = dpo::consumed_marker(&pairs_path);
        let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned();
        if marker.exists() && ckpt_path.exists() {
            let report: RoundReport = serde_json::from_str(&fs::read_to_string(&marker)?).map_err(|e| PipelineError::Artifact {
                path: marker.clone(),
                reason: e.to_string(),
            })?;
            current = read_checkpoint(&ckpt_path)?;
            reports.push(report);
        } else {
            if !pairs_path.exists() {
                let pairs = match judge {
                    JudgeKind::Oracle => {
                        let ocfg = crate::annotator::OracleConfig {
                            seed: derive_seed(cfg.judge.oracle.seed, &[u64::from(round)]),
                            ..cfg.judge.oracle
                        };
                        let mut oracle = Oracle::new(ocfg, s.vocab.clone())?;
                        dpo::make_round_pairs(
                            &current,
                            s.train.as_slice(),
                            cfg.dpo.pairs_per_round,
                            round,
                            &cfg.dpo.sampler,
                            &mut oracle,
                            pair_seed(cfg),
                        )?
                    }
                    JudgeKind::Service => match collect_service_round(cfg, &s, &current, round)? {
                        Ok(pairs) => pairs,
                        Err((missing, total)) => {
                            return Ok(DpoStatus::Waiting {
                                round,
                                missing,
                                total,
                                finished: reports,
                            })
                        }
                    },
                };
                dpo::write_pairs(&pairs_path, &pairs)?;
            }
            let state = RoundState::start(round, current, &pairs_path);
            let outcome = dpo::run_round(&state, &cfg.dpo, &s.train)?;
            write_checkpoint(&ckpt_path, &outcome.checkpoint)?;
            current = outcome.checkpoint;
            reports.push(outcome.report);
        }
        manifest
            .checkpoints
            .insert(dpo::round_version(round), PathBuf::from(rel(&ckpt_path)));
        files.push(rel(&ckpt_path));
        files.push(rel(&pairs_path));
    }
    write_json(&dir.join("rounds.json"), &reports)?;
    files.push("rounds.json".into());
    let refs: Vec<&str> = files.iter().map(String::as_str).collect();
    manifest.write(dir, &refs)?;
    Ok(DpoStatus::Complete(reports))
}

/// Queues the round on first call; afterwards exports it once complete.
/// `Err((missing, total))` while votes are outstanding.
fn collect_service_round(
    cfg: &ExperimentConfig,
    s: &Scenario,
    policy: &PolicyParams,
    round: u32,
) -> Result<std::result::Result<Vec<dpo::PreferencePair>, (usize, usize)>> {
    let root = cfg.service_root();
    let mut store = Store::open(&root, s.vocab.clone(), cfg.elo)?;
    if !store.rounds().contains(&round) {
        let tasks = sample_tasks(
            policy,
            s.train.as_slice(),
            cfg.dpo.pairs_per_round,
            round,
            &cfg.dpo.sampler,
            pair_seed(cfg),
        )?;
        service::enqueue_round(&root, round, &tasks, cfg.service.seed)?;
        store.reload_round(round)?;
    }
    let p = store.progress(round)?;
    if p.voted < p.total {
        return Ok(Err((p.total - p.voted, p.total)));
    }
    store.export(round, false)?;
    Ok(Ok(store.pairs(round)?))
}

/// Writes an oracle-labeled pairs file for `round` from `policy`.
pub fn gen_pairs(cfg: &ExperimentConfig, policy: &PolicyParams, round: u32, n: usize, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let s = scenario(cfg)?;
    let mut oracle = Oracle::new(cfg.judge.oracle, s.vocab.clone())?;
    let pairs = dpo::make_round_pairs(policy, s.train.as_slice(), n, round, &cfg.dpo.sampler, &mut oracle, pair_seed(cfg))?;
    dpo::write_pairs(out, &pairs)?;
    Ok(pairs.len())
}

/// Oracle-judged blind votes between checkpoints on held-out prompts.
///
/// Each vote draws two distinct systems and a prompt, samples one candidate
/// from each at the eval temperature, and records the oracle's preference.
/// Ties and unjudgeable pairs produce no vote.
pub fn simulate_votes(cfg: &ExperimentConfig, systems: &[PolicyParams], n_votes: usize, seed: u64) -> Result<Vec<VoteRecord>> {
    if systems.len() < 2 {
        return Err(ConfigError::Invalid("simulate-votes needs at least two systems".into()).into());
    }
    let s = scenario(cfg)?;
    let held = s.heldout.as_slice();
    let mut oracle = Oracle::new(cfg.judge.oracle, s.vocab.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut votes = Vec::with_capacity(n_votes);
    for i in 0..n_votes {
        let a = rng.random_range(0..systems.len());
        let mut b = rng.random_range(0..systems.len() - 1);
        if b >= a {
            b += 1;
        }
        let prompt = &held[rng.random_range(0..held.len())];
        let ca = systems[a].sample(prompt, cfg.eval.temperature, cfg.eval.max_len, derive_seed(seed, &[i as u64, 0]))?;
        let cb = systems[b].sample(prompt, cfg.eval.temperature, cfg.eval.max_len, derive_seed(seed, &[i as u64, 1]))?;
        let winner = match (ca.voiced_len(), cb.voiced_len()) {
            (0, 0) => continue,
            (0, _) => Winner::B,
            (_, 0) => Winner::A,
            _ => match oracle.judge(prompt, &ca, &cb)? {
                Judgment::PreferA => Winner::A,
                Judgment::PreferB => Winner::B,
                Judgment::Tie => continue,
            },
        };
        votes.push(VoteRecord {
            schema_version: VOTE_SCHEMA_VERSION,
            vote_id: format!("oracle-{i:06}"),
            system_a: systems[a].version().to_owned(),
            system_b: systems[b].version().to_owned(),
            winner,
            annotator_id: oracle.annotator_id().to_owned(),
            timestamp: i as u64,
            prompt_id: prompt.id.clone(),
        });
    }
    Ok(votes)
}

/// Checkpoints listed in a run directory's manifest, by system name.
pub fn run_checkpoints(dir: &Path) -> Result<Vec<(String, PolicyParams)>> {
    let m = RunManifest::read(dir)?;
    m.checkpoints
        .iter()
        .map(|(name, rel)| Ok((name.clone(), read_checkpoint(&dir.join(rel))?)))
        .collect()
}
