//! Iterative DPO with a moving reference.
//!
//! Round `r` starts from the checkpoint of round `r − 1`, which is also the
//! frozen reference, and minimizes
//! `mean −log σ(β [(log π(y⁺) − log π(y⁻)) − (log π_ref(y⁺) − log π_ref(y⁻))])`
//! over that round's pairs. A pairs file is consumed by exactly one round.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{JudgeError, Judgment, PairSource, PreferenceJudge};
use crate::derive_seed;
use crate::env::{Candidate, Prompt, PromptSet};
use crate::policy::{write_checkpoint, PolicyError, PolicyParams};

pub const PAIRS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DpoError {
    #[error("invalid DPO config: {0}")]
    Config(String),
    #[error("empty preference batch")]
    EmptyBatch,
    #[error("pairs file {path} line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("pairs file {0} was already consumed by a previous round")]
    PairsReused(PathBuf),
    #[error("pair {index} is tagged for round {found}, but this is round {expected}")]
    RoundTag { index: usize, expected: u32, found: u32 },
    #[error("round {round} needs {needed} pairs, the file holds {found}")]
    NotEnoughPairs { round: u32, needed: usize, found: usize },
    #[error("reference {reference} is not the round's starting checkpoint {policy}")]
    ReferenceMismatch { policy: String, reference: String },
    #[error("unknown prompt {0}")]
    UnknownPrompt(String),
    #[error("round {round} incomplete: {missing} of {wanted} pairs missing")]
    IncompleteRound { round: u32, missing: usize, wanted: usize },
    #[error("non-finite DPO update in round {round}, epoch {epoch}")]
    NonFinite { round: u32, epoch: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DpoError>;

/// One labeled pair; the line format shared with the preference service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub schema_version: u32,
    pub round: u32,
    pub prompt_id: String,
    pub preferred: Candidate,
    pub dispreferred: Candidate,
    pub source: PairSource,
    pub annotator_id: String,
    /// Milliseconds since the Unix epoch for human votes; the pair's ordinal
    /// for oracle labels, so that oracle files are reproducible.
    pub timestamp: u64,
}

impl PreferencePair {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.schema_version != PAIRS_SCHEMA_VERSION {
            return Err(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.round == 0 {
            return Err("round must be >= 1".into());
        }
        if self.preferred.prompt_id != self.prompt_id || self.dispreferred.prompt_id != self.prompt_id {
            return Err("candidates do not share the pair's prompt_id".into());
        }
        if self.preferred.token_ids == self.dispreferred.token_ids {
            return Err("preferred and dispreferred are the same sequence".into());
        }
        Ok(())
    }
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |reason: String| DpoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let pair: PreferencePair = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        pair.validate().map_err(parse)?;
        out.push(pair);
    }
    Ok(out)
}

/// Which checkpoint round 1 starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DpoInit {
    Base,
    Grpo,
}

/// How candidates are drawn when collecting pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub max_len: usize,
    /// Draws allowed per requested pair before the round is declared incomplete.
    pub max_attempts_per_pair: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.5,
            max_len: 24,
            max_attempts_per_pair: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pairs_per_round: usize,
    pub rounds: u32,
    pub seed: u64,
    pub init: DpoInit,
    pub sampler: SamplerConfig,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 1.0,
            epochs: 30,
            batch_size: 32,
            pairs_per_round: 200,
            rounds: 3,
            seed: 0,
            init: DpoInit::Base,
            sampler: SamplerConfig::default(),
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DpoError::Config(m.into()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.pairs_per_round == 0 || self.batch_size == 0 {
            return bad("pairs_per_round and batch_size must be >= 1");
        }
        if !(self.sampler.temperature > 0.0) || self.sampler.max_len == 0 || self.sampler.max_attempts_per_pair == 0 {
            return bad("sampler needs positive temperature, max_len and attempt budget");
        }
        Ok(())
    }
}

/// `−log σ(x)`, stable for large |x|.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn lookup<'a>(prompts: &'a PromptSet, id: &str) -> Result<&'a Prompt> {
    prompts.get(id).ok_or_else(|| DpoError::UnknownPrompt(id.to_owned()))
}

/// Reference log-likelihood gap `log π_ref(y⁺) − log π_ref(y⁻)` of each pair.
pub fn reference_gaps(reference: &PolicyParams, batch: &[PreferencePair], prompts: &PromptSet) -> Result<Vec<f64>> {
    batch
        .par_iter()
        .map(|p| {
            let prompt = lookup(prompts, &p.prompt_id)?;
            Ok(reference.sequence_logprob(prompt, &p.preferred)? - reference.sequence_logprob(prompt, &p.dispreferred)?)
        })
        .collect()
}

/// Mean DPO loss over `batch` and its exact gradient with respect to `theta`.
pub fn dpo_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PreferencePair],
    prompts: &PromptSet,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    let gaps = reference_gaps(reference, batch, prompts)?;
    dpo_loss_with_gaps(theta, batch, &gaps, prompts, beta)
}

/// [`dpo_loss`] with the reference gaps precomputed.
pub fn dpo_loss_with_gaps(
    theta: &PolicyParams,
    batch: &[PreferencePair],
    ref_gaps: &[f64],
    prompts: &PromptSet,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    if !(beta > 0.0) {
        return Err(DpoError::Config("beta must be positive".into()));
    }
    let n = batch.len() as f64;
    let dim = theta.weights().len();
    // Per-pair work fans out; the reduction below runs in a fixed order so
    // the result does not depend on thread scheduling.
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .zip(ref_gaps.par_iter())
        .map(|(p, &ref_gap)| {
            let prompt = lookup(prompts, &p.prompt_id)?;
            let mut g = vec![0.0; dim];
            let lp_pos = theta.sequence_logprob(prompt, &p.preferred)?;
            let lp_neg = theta.sequence_logprob(prompt, &p.dispreferred)?;
            let m = (lp_pos - lp_neg) - ref_gap;
            let coef = -beta * sigmoid(-beta * m) / n;
            theta.accumulate_logprob_grad(prompt, &p.preferred, coef, &mut g)?;
            theta.accumulate_logprob_grad(prompt, &p.dispreferred, -coef, &mut g)?;
            Ok((neg_log_sigmoid(beta * m) / n, g))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// State at the start of a round.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: u32,
    pub policy: PolicyParams,
    /// Frozen reference; must be byte-identical to `policy`.
    pub reference: PolicyParams,
    pub pairs_file: PathBuf,
    pub consumed: bool,
}

impl RoundState {
    pub fn start(round: u32, policy: PolicyParams, pairs_file: impl Into<PathBuf>) -> Self {
        Self {
            round,
            reference: policy.clone(),
            policy,
            pairs_file: pairs_file.into(),
            consumed: false,
        }
    }

    /// State for the round after `outcome`, reading `pairs_file`.
    pub fn next(outcome: &RoundOutcome, pairs_file: impl Into<PathBuf>) -> Self {
        Self::start(outcome.report.round + 1, outcome.checkpoint.clone(), pairs_file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub version: String,
    pub reference_hash: String,
    pub checkpoint_hash: String,
    pub pairs: usize,
    pub loss_start: f64,
    pub loss_end: f64,
    /// Fraction of pairs whose implicit-reward margin is positive at the end.
    pub pair_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub checkpoint: PolicyParams,
    pub report: RoundReport,
}

pub fn consumed_marker(pairs_file: &Path) -> PathBuf {
    let mut name = pairs_file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".consumed");
    pairs_file.with_file_name(name)
}

pub fn round_version(round: u32) -> String {
    format!("{}-dpo-v{round}", crate::scenario::BASE_VERSION)
}

/// Trains one round and marks its pairs file consumed.
pub fn run_round(state: &RoundState, cfg: &DpoConfig, prompts: &PromptSet) -> Result<RoundOutcome> {
    cfg.validate()?;
    let marker = consumed_marker(&state.pairs_file);
    if state.consumed || marker.exists() {
        return Err(DpoError::PairsReused(state.pairs_file.clone()));
    }
    let (policy_hash, reference_hash) = (state.policy.hash(), state.reference.hash());
    if policy_hash != reference_hash {
        return Err(DpoError::ReferenceMismatch {
            policy: policy_hash,
            reference: reference_hash,
        });
    }
    let mut pairs = read_pairs(&state.pairs_file)?;
    if let Some((index, p)) = pairs.iter().enumerate().find(|(_, p)| p.round != state.round) {
        return Err(DpoError::RoundTag {
            index,
            expected: state.round,
            found: p.round,
        });
    }
    if pairs.len() < cfg.pairs_per_round {
        return Err(DpoError::NotEnoughPairs {
            round: state.round,
            needed: cfg.pairs_per_round,
            found: pairs.len(),
        });
    }
    pairs.truncate(cfg.pairs_per_round);

    let gaps = reference_gaps(&state.reference, &pairs, prompts)?;
    let (loss_start, _) = dpo_loss_with_gaps(&state.policy, &pairs, &gaps, prompts, cfg.beta)?;
    let mut theta = state.policy.clone();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[u64::from(state.round), epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreferencePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let batch_gaps: Vec<f64> = chunk.iter().map(|&i| gaps[i]).collect();
            let (_, grad) = dpo_loss_with_gaps(&theta, &batch, &batch_gaps, prompts, cfg.beta)?;
            theta = theta
                .stepped(&grad, -cfg.learning_rate)
                .map_err(|_| DpoError::NonFinite { round: state.round, epoch })?;
        }
    }
    let version = round_version(state.round);
    let theta = theta.with_version(version.clone());
    let (loss_end, _) = dpo_loss_with_gaps(&theta, &pairs, &gaps, prompts, cfg.beta)?;
    let correct = pairs
        .iter()
        .zip(&gaps)
        .map(|(p, g)| {
            let prompt = lookup(prompts, &p.prompt_id)?;
            let gap = theta.sequence_logprob(prompt, &p.preferred)? - theta.sequence_logprob(prompt, &p.dispreferred)?;
            Ok(usize::from(gap - g > 0.0))
        })
        .sum::<Result<usize>>()?;
    let report = RoundReport {
        round: state.round,
        version,
        reference_hash,
        checkpoint_hash: theta.hash(),
        pairs: pairs.len(),
        loss_start,
        loss_end,
        pair_accuracy: correct as f64 / pairs.len() as f64,
    };
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&marker)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => DpoError::PairsReused(state.pairs_file.clone()),
            _ => DpoError::Io(e),
        })?;
    serde_json::to_writer(&mut f, &report).map_err(std::io::Error::from)?;
    f.write_all(b"\n")?;
    Ok(RoundOutcome { checkpoint: theta, report })
}

/// Samples candidate pairs from `policy` and has `judge` label them.
///
/// Identical sequences, unjudgeable (empty) candidates and ties are discarded
/// and redrawn. Draw `d` uses prompt `d mod |prompts|` and the seeds
/// `derive_seed(seed, [round, d, 0|1])`.
pub fn make_round_pairs(
    policy: &PolicyParams,
    prompts: &[Prompt],
    n_pairs: usize,
    round: u32,
    sampler: &SamplerConfig,
    judge: &mut dyn PreferenceJudge,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if n_pairs == 0 || prompts.is_empty() {
        return Err(DpoError::Config("need at least one pair and one prompt".into()));
    }
    let budget = n_pairs.saturating_mul(sampler.max_attempts_per_pair);
    let mut out = Vec::with_capacity(n_pairs);
    let mut draw = 0usize;
    while out.len() < n_pairs && draw < budget {
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
        if a.token_ids == b.token_ids {
            continue;
        }
        let (preferred, dispreferred) = match judge.judge(prompt, &a, &b) {
            Ok(Judgment::PreferA) => (a, b),
            Ok(Judgment::PreferB) => (b, a),
            Ok(Judgment::Tie) | Err(JudgeError::EmptyCandidate) => continue,
            Err(JudgeError::Unavailable(_)) => break,
            Err(e) => return Err(e.into()),
        };
        out.push(PreferencePair {
            schema_version: PAIRS_SCHEMA_VERSION,
            round,
            prompt_id: prompt.id.clone(),
            preferred,
            dispreferred,
            source: judge.source(),
            annotator_id: judge.annotator_id().to_owned(),
            timestamp: out.len() as u64,
        });
    }
    if out.len() < n_pairs {
        return Err(DpoError::IncompleteRound {
            round,
            missing: n_pairs - out.len(),
            wanted: n_pairs,
        });
    }
    Ok(out)
}

/// Files of one round inside a run directory.
pub fn round_paths(dir: &Path, round: u32) -> (PathBuf, PathBuf) {
    let d = dir.join(format!("round_{round}"));
    (d.join("pairs.jsonl"), d.join("policy.ckpt"))
}

/// Runs `cfg.rounds` rounds of collect-then-train, writing each round's
/// pairs, marker and checkpoint under `dir`.
pub fn run_rounds(
    initial: &PolicyParams,
    train: &PromptSet,
    cfg: &DpoConfig,
    judge: &mut dyn PreferenceJudge,
    dir: &Path,
    mut on_round: impl FnMut(&RoundReport),
) -> Result<Vec<RoundOutcome>> {
    cfg.validate()?;
    let mut current = initial.clone();
    let mut outcomes = Vec::with_capacity(cfg.rounds as usize);
    for round in 1..=cfg.rounds {
        let (pairs_path, ckpt_path) = round_paths(dir, round);
        let pairs = make_round_pairs(
            &current,
            train.as_slice(),
            cfg.pairs_per_round,
            round,
            &cfg.sampler,
            judge,
            derive_seed(cfg.seed, &[0x9a12]),
        )?;
        write_pairs(&pairs_path, &pairs)?;
        let state = RoundState::start(round, current, &pairs_path);
        let outcome = run_round(&state, cfg, train)?;
        write_checkpoint(&ckpt_path, &outcome.checkpoint)?;
        on_round(&outcome.report);
        current = outcome.checkpoint.clone();
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Vocab;
    use crate::policy::FeatureMap;
    use approx::assert_relative_eq;

    fn setup() -> (Vocab, PromptSet, PolicyParams) {
        let vocab = Vocab::geometric("ab", 3, 100.0, 200.0).unwrap();
        let prompts = PromptSet::new(vec![
            Prompt::new("p0", "ab", vec![1.0, 0.0, 0.0]).unwrap(),
            Prompt::new("p1", "ba", vec![0.0, 1.0, 0.0]).unwrap(),
        ])
        .unwrap();
        let fm = FeatureMap::for_vocab(&vocab, 4, 2);
        let n = fm.dimension() * fm.vocab_size();
        let w = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        (vocab, prompts, PolicyParams::from_weights(fm, w, "t").unwrap())
    }

    fn pair(round: u32, prompt: &str, pos: &[u32], neg: &[u32]) -> PreferencePair {
        let c = |ids: &[u32]| Candidate {
            prompt_id: prompt.into(),
            token_ids: ids.to_vec(),
            terminated: ids.last() == Some(&6),
            token_logprobs: vec![0.0; ids.len()],
            seed: 0,
        };
        PreferencePair {
            schema_version: PAIRS_SCHEMA_VERSION,
            round,
            prompt_id: prompt.into(),
            preferred: c(pos),
            dispreferred: c(neg),
            source: PairSource::Oracle,
            annotator_id: "o".into(),
            timestamp: 0,
        }
    }

    fn fixture_pairs(round: u32) -> Vec<PreferencePair> {
        vec![
            pair(round, "p0", &[0, 4, 6], &[1, 3, 6]),
            pair(round, "p1", &[3, 1, 6], &[3, 3, 3, 3]),
            pair(round, "p0", &[2, 5, 6], &[6]),
        ]
    }

    #[test]
    fn loss_at_reference_is_ln2() {
        let (_, prompts, theta) = setup();
        let (loss, _) = dpo_loss(&theta, &theta, &fixture_pairs(1), &prompts, 0.1).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn logistic_oracle_value() {
        // −ln σ(0.3), evaluated at 50 digits
        assert_relative_eq!(neg_log_sigmoid(0.3), 0.554_355_244_468_527_1, epsilon = 1e-15);
        assert_relative_eq!(neg_log_sigmoid(-800.0), 800.0, epsilon = 1e-12);
        assert!(neg_log_sigmoid(800.0) >= 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (_, prompts, reference) = setup();
        let theta = reference
            .stepped(&vec![0.01; reference.weights().len()], 1.0)
            .unwrap()
            .stepped(
                &(0..reference.weights().len())
                    .map(|i| ((i % 5) as f64 - 2.0) * 0.1)
                    .collect::<Vec<_>>(),
                1.0,
            )
            .unwrap();
        let batch = fixture_pairs(1);
        let (_, grad) = dpo_loss(&theta, &reference, &batch, &prompts, 0.5).unwrap();
        let h = 1e-5;
        for i in (0..grad.len()).step_by(11) {
            let mut e = vec![0.0; grad.len()];
            e[i] = 1.0;
            let up = dpo_loss(&theta.stepped(&e, h).unwrap(), &reference, &batch, &prompts, 0.5)
                .unwrap()
                .0;
            let dn = dpo_loss(&theta.stepped(&e, -h).unwrap(), &reference, &batch, &prompts, 0.5)
                .unwrap()
                .0;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let (_, prompts, reference) = setup();
        let batch = fixture_pairs(1);
        let (l0, g) = dpo_loss(&reference, &reference, &batch, &prompts, 0.1).unwrap();
        let (l1, _) = dpo_loss(&reference.stepped(&g, -1e-3).unwrap(), &reference, &batch, &prompts, 0.1).unwrap();
        assert!(l1 < l0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (_, prompts, theta) = setup();
        assert!(matches!(dpo_loss(&theta, &theta, &[], &prompts, 0.1), Err(DpoError::EmptyBatch)));
    }

    #[test]
    fn pairs_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs = fixture_pairs(2);
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), pairs);
        let mut bad = pairs[0].clone();
        bad.dispreferred = bad.preferred.clone();
        assert!(bad.validate().is_err());
        let mut bad = pairs[0].clone();
        bad.schema_version = 9;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn round_consumes_its_file_once() {
        let (_, prompts, theta) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r1.jsonl");
        write_pairs(&path, &fixture_pairs(1)).unwrap();
        let cfg = DpoConfig {
            pairs_per_round: 3,
            epochs: 2,
            ..DpoConfig::default()
        };
        let state = RoundState::start(1, theta.clone(), &path);
        let out = run_round(&state, &cfg, &prompts).unwrap();
        assert_eq!(out.report.reference_hash, theta.hash());
        assert_eq!(out.checkpoint.version(), "channel-base-dpo-v1");
        assert!(consumed_marker(&path).exists());
        assert!(matches!(run_round(&state, &cfg, &prompts), Err(DpoError::PairsReused(_))));
    }

    #[test]
    fn round_tags_are_enforced() {
        let (_, prompts, theta) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r2.jsonl");
        write_pairs(&path, &fixture_pairs(2)).unwrap();
        let cfg = DpoConfig {
            pairs_per_round: 3,
            ..DpoConfig::default()
        };
        let state = RoundState::start(1, theta, &path);
        assert!(matches!(
            run_round(&state, &cfg, &prompts),
            Err(DpoError::RoundTag { expected: 1, found: 2, .. })
        ));
    }

    #[test]
    fn mismatched_reference_is_rejected() {
        let (_, prompts, theta) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_pairs(&path, &fixture_pairs(1)).unwrap();
        let mut state = RoundState::start(1, theta.clone(), &path);
        state.reference = theta.with_version("other");
        let cfg = DpoConfig {
            pairs_per_round: 3,
            ..DpoConfig::default()
        };
        assert!(matches!(run_round(&state, &cfg, &prompts), Err(DpoError::ReferenceMismatch { .. })));
    }

    #[test]
    fn zero_epochs_leave_weights_alone() {
        let (_, prompts, theta) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_pairs(&path, &fixture_pairs(1)).unwrap();
        let cfg = DpoConfig {
            pairs_per_round: 3,
            epochs: 0,
            ..DpoConfig::default()
        };
        let out = run_round(&RoundState::start(1, theta.clone(), &path), &cfg, &prompts).unwrap();
        assert_eq!(out.checkpoint.weights(), theta.weights());
        let next = RoundState::next(&out, dir.path().join("r2.jsonl"));
        assert_eq!(next.round, 2);
        assert_eq!(next.reference.hash(), out.checkpoint.hash());
    }

    #[test]
    fn single_pair_margin_grows_every_epoch() {
        let (_, prompts, theta) = setup();
        let p = fixture_pairs(1).remove(0);
        let prompt = prompts.get("p0").unwrap();
        let gap =
            |t: &PolicyParams| t.sequence_logprob(prompt, &p.preferred).unwrap() - t.sequence_logprob(prompt, &p.dispreferred).unwrap();
        let mut t = theta.clone();
        let mut last = gap(&t);
        let gaps = reference_gaps(&theta, std::slice::from_ref(&p), &prompts).unwrap();
        for _ in 0..20 {
            let (_, g) = dpo_loss_with_gaps(&t, std::slice::from_ref(&p), &gaps, &prompts, 0.1).unwrap();
            t = t.stepped(&g, -5.0).unwrap();
            let now = gap(&t);
            assert!(now > last, "{now} <= {last}");
            last = now;
        }
    }
}
