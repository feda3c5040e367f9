//! Group Relative Policy Optimization.
//!
//! For every prompt a group of candidates is sampled from a snapshot of the
//! policy, scored, and turned into group-normalized advantages
//! `a_i = (r_i − mean) / (std + floor)`. The update ascends the clipped
//! surrogate `mean_i min(ρ_i a_i, clip(ρ_i, 1−ε, 1+ε) a_i)` where `ρ_i` is the
//! sequence probability ratio against the sampling snapshot. No value
//! network is involved.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::env::{self, Candidate, EnvError, Prompt, Vocab};
use crate::policy::{PolicyError, PolicyParams};
use crate::reward::{self, Metrics, RewardError, RewardWeights, Temperatures, DEFAULT_SIM_FLOOR};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid GRPO config: {0}")]
    Config(String),
    #[error("need at least 2 rewards per group, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
    #[error("non-finite update at step {step}: {detail}")]
    NonFiniteUpdate { step: usize, detail: String },
    #[error("no prompts to train on")]
    NoPrompts,
    #[error("unknown prompt id {0}")]
    UnknownPrompt(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GrpoError>;

/// Reward composition used to score candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub weights: RewardWeights,
    pub temps: Temperatures,
    pub sim_floor: f64,
}

impl RewardSpec {
    pub fn clean() -> Self {
        Self {
            weights: RewardWeights::clean(),
            temps: Temperatures::default(),
            sim_floor: DEFAULT_SIM_FLOOR,
        }
    }

    pub fn sim() -> Self {
        Self {
            weights: RewardWeights::sim(),
            ..Self::clean()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.temps.validate()?;
        reward::check_floor(self.sim_floor)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub adv_std_floor: f64,
    pub steps: usize,
    pub prompts_per_step: usize,
    pub reward: RewardSpec,
    pub max_len: usize,
    pub temperature: f64,
    /// Surrogate passes per batch. With one pass every ratio is 1.
    pub inner_epochs: usize,
    /// Weight of the per-state KL penalty to the initial policy; 0 disables it.
    pub kl_coef: f64,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            learning_rate: 0.5,
            clip_epsilon: 0.2,
            adv_std_floor: 1e-6,
            steps: 300,
            prompts_per_step: 16,
            reward: RewardSpec::clean(),
            max_len: 24,
            temperature: 1.0,
            inner_epochs: 1,
            kl_coef: 0.0,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GrpoError::Config(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.clip_epsilon > 0.0) || !(self.adv_std_floor > 0.0) {
            return bad("clip_epsilon and adv_std_floor must be positive");
        }
        if self.prompts_per_step == 0 || self.max_len == 0 || self.inner_epochs == 0 {
            return bad("prompts_per_step, max_len and inner_epochs must be >= 1");
        }
        if !(self.temperature > 0.0) || !(self.kl_coef >= 0.0) {
            return bad("temperature must be positive and kl_coef non-negative");
        }
        self.reward.validate()
    }
}

/// One prompt's sampled group with its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub prompt_id: String,
    pub candidates: Vec<Candidate>,
    pub metrics: Vec<Metrics>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_cer: f64,
    pub mean_nll: f64,
    pub mean_sim: Option<f64>,
    pub std_logf0: f64,
    pub nonterm_rate: f64,
    pub mean_len: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "step,mean_reward,mean_cer,mean_nll,mean_sim,std_logf0,nonterm_rate,mean_len";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let sim = r.mean_sim.map(|s| format!("{s:.9}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.9},{:.9},{:.9},{},{:.9},{:.9},{:.9}",
                r.step, r.mean_reward, r.mean_cer, r.mean_nll, sim, r.std_logf0, r.nonterm_rate, r.mean_len
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// `(r_i − mean) / (std + floor)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if let Some(&r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(GrpoError::NonFiniteReward(r));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + std_floor)).collect())
}

/// Scores one candidate and composes its reward.
///
/// Under a three-term reward a candidate with no voiced tokens has no
/// speaker embedding; it is assigned similarity −1 (the floored utility).
pub fn score_candidate(
    candidate: &Candidate,
    prompt: &Prompt,
    vocab: &Vocab,
    scorer: &PolicyParams,
    spec: &RewardSpec,
) -> Result<(Metrics, f64)> {
    let with_sim = spec.weights.uses_similarity();
    let metrics = match env::score(candidate, prompt, vocab, scorer, with_sim) {
        Err(EnvError::EmptyCandidate) if with_sim => {
            let m = env::score(candidate, prompt, vocab, scorer, false)?;
            Metrics::new(m.cer, m.nll, Some(-1.0))?
        }
        other => other?,
    };
    let r = reward::reward(&metrics, &spec.weights, &spec.temps, spec.sim_floor)?;
    Ok((metrics, r))
}

/// Samples and scores `cfg.group_size` candidates for `prompt`.
pub fn sample_group(
    params: &PolicyParams,
    prompt: &Prompt,
    vocab: &Vocab,
    cfg: &GrpoConfig,
    scorer: &PolicyParams,
    group_seed: u64,
) -> Result<GroupSample> {
    let scored: Vec<(Candidate, Metrics, f64)> = (0..cfg.group_size)
        .into_par_iter()
        .map(|i| {
            let c = params.sample(prompt, cfg.temperature, cfg.max_len, derive_seed(group_seed, &[i as u64]))?;
            let (m, r) = score_candidate(&c, prompt, vocab, scorer, &cfg.reward)?;
            Ok((c, m, r))
        })
        .collect::<Result<_>>()?;
    let rewards: Vec<f64> = scored.iter().map(|s| s.2).collect();
    let advantages = group_advantages(&rewards, cfg.adv_std_floor)?;
    let (candidates, metrics) = scored.into_iter().map(|(c, m, _)| (c, m)).unzip();
    Ok(GroupSample {
        prompt_id: prompt.id.clone(),
        candidates,
        metrics,
        rewards,
        advantages,
    })
}

/// Gradient of the clipped surrogate (minus the optional KL penalty),
/// averaged over every candidate in `groups`.
///
/// Ratios are taken against the log-probabilities recorded at sampling
/// time. When `params` is the sampling snapshot every ratio is exactly 1 and
/// this is the advantage-weighted score function.
pub fn surrogate_gradient(
    params: &PolicyParams,
    groups: &[GroupSample],
    prompts: &[&Prompt],
    cfg: &GrpoConfig,
    reference: Option<&PolicyParams>,
    is_snapshot: bool,
) -> Result<Vec<f64>> {
    let n: usize = groups.iter().map(|g| g.candidates.len()).sum();
    let mut grad = vec![0.0; params.weights().len()];
    if n == 0 {
        return Ok(grad);
    }
    let inv_n = 1.0 / n as f64;
    for g in groups {
        let prompt = prompts
            .iter()
            .copied()
            .find(|p| p.id == g.prompt_id)
            .ok_or_else(|| GrpoError::UnknownPrompt(g.prompt_id.clone()))?;
        for (c, &adv) in g.candidates.iter().zip(&g.advantages) {
            if adv != 0.0 {
                let ratio = if is_snapshot {
                    1.0
                } else {
                    let old: f64 = c.token_logprobs.iter().sum();
                    (params.sequence_logprob(prompt, c)? - old).exp()
                };
                let clipped = (adv > 0.0 && ratio > 1.0 + cfg.clip_epsilon) || (adv < 0.0 && ratio < 1.0 - cfg.clip_epsilon);
                if !clipped {
                    params.accumulate_logprob_grad(prompt, c, adv * ratio * inv_n, &mut grad)?;
                }
            }
            if let Some(r) = reference.filter(|_| cfg.kl_coef > 0.0) {
                params.accumulate_kl_grad(r, prompt, c, -cfg.kl_coef * inv_n, &mut grad)?;
            }
        }
    }
    Ok(grad)
}

fn step_record(step: usize, groups: &[GroupSample], vocab: &Vocab) -> Result<StepRecord> {
    let mut n = 0usize;
    let (mut r, mut c, mut l, mut s, mut len, mut open) = (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    let mut with_sim = false;
    let mut contours = Vec::new();
    for g in groups {
        for ((cand, m), rew) in g.candidates.iter().zip(&g.metrics).zip(&g.rewards) {
            n += 1;
            r += rew;
            c += m.cer;
            l += m.nll;
            if let Some(sim) = m.sim {
                with_sim = true;
                s += sim;
            }
            len += cand.token_ids.len() as f64;
            open += usize::from(!cand.terminated);
            contours.push(env::pitch_contour(cand, vocab)?);
        }
    }
    let nf = n.max(1) as f64;
    let std_logf0 = match env::prosody_stats(&contours) {
        Ok(st) => st.std_logf0,
        Err(EnvError::NoVoicedFrames) => 0.0,
        Err(e) => return Err(e.into()),
    };
    Ok(StepRecord {
        step,
        mean_reward: r / nf,
        mean_cer: c / nf,
        mean_nll: l / nf,
        mean_sim: with_sim.then_some(s / nf),
        std_logf0,
        nonterm_rate: open as f64 / nf,
        mean_len: len / nf,
    })
}

/// Prompts used at `step`: a contiguous window cycling through the pool.
pub fn step_prompts(prompts: &[Prompt], step: usize, per_step: usize) -> Vec<&Prompt> {
    (0..per_step.min(prompts.len()))
        .map(|j| &prompts[(step * per_step + j) % prompts.len()])
        .collect()
}

/// One GRPO update over `prompts`.
pub fn grpo_step(
    params: &PolicyParams,
    prompts: &[&Prompt],
    vocab: &Vocab,
    cfg: &GrpoConfig,
    scorer: &PolicyParams,
    reference: Option<&PolicyParams>,
    step: usize,
) -> Result<(PolicyParams, StepRecord)> {
    if prompts.is_empty() {
        return Err(GrpoError::NoPrompts);
    }
    let groups: Vec<GroupSample> = prompts
        .iter()
        .enumerate()
        .map(|(j, p)| sample_group(params, p, vocab, cfg, scorer, derive_seed(cfg.seed, &[step as u64, j as u64])))
        .collect::<Result<_>>()?;
    let record = step_record(step, &groups, vocab)?;
    let mut current = params.clone();
    for epoch in 0..cfg.inner_epochs {
        let grad = surrogate_gradient(&current, &groups, prompts, cfg, reference, epoch == 0)?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(GrpoError::NonFiniteUpdate {
                step,
                detail: format!("gradient entry {i} is {}", grad[i]),
            });
        }
        current = current.stepped(&grad, cfg.learning_rate).map_err(|e| GrpoError::NonFiniteUpdate {
            step,
            detail: e.to_string(),
        })?;
    }
    Ok((current, record))
}

/// Runs `cfg.steps` GRPO updates; `on_step` sees each record as it lands.
pub fn train_grpo(
    initial: &PolicyParams,
    prompts: &[Prompt],
    vocab: &Vocab,
    cfg: &GrpoConfig,
    scorer: &PolicyParams,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(PolicyParams, TrainLog)> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(GrpoError::NoPrompts);
    }
    let mut params = initial.clone();
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = step_prompts(prompts, step, cfg.prompts_per_step);
        let (next, rec) = grpo_step(&params, &batch, vocab, cfg, scorer, Some(initial), step)?;
        on_step(&rec);
        log.records.push(rec);
        params = next;
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[0.5, 0.5, 0.5], 1e-6).unwrap(), vec![0.0; 3]);
        let a = group_advantages(&[0.0, 1.0], 1e-6).unwrap();
        assert_relative_eq!(a[0], -0.999_998_000_004, epsilon = 1e-12);
        assert_relative_eq!(a[1], 0.999_998_000_004, epsilon = 1e-12);
        let a = group_advantages(&[1.0, 2.0, 3.0, 4.0], 1e-6).unwrap();
        let expect = [
            -1.341_639_586_500_947,
            -0.447_213_195_500_315_7,
            0.447_213_195_500_315_7,
            1.341_639_586_500_947,
        ];
        for (x, y) in a.iter().zip(expect) {
            assert_relative_eq!(*x, y, epsilon = 1e-12);
        }
        assert!(matches!(group_advantages(&[1.0], 1e-6), Err(GrpoError::GroupTooSmall(1))));
        assert!(group_advantages(&[1.0, f64::NAN], 1e-6).is_err());
    }

    #[test]
    fn shift_invariance_is_exact_for_dyadic_rewards() {
        let r = [0.25, 0.5, 0.125, 0.75];
        let shifted: Vec<f64> = r.iter().map(|x| x + 2.0).collect();
        assert_eq!(group_advantages(&r, 1e-6).unwrap(), group_advantages(&shifted, 1e-6).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        let mut c = GrpoConfig::default();
        c.group_size = 1;
        assert!(c.validate().is_err());
        let mut c = GrpoConfig::default();
        c.reward.weights.lambda_c = 0.7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn train_log_csv_layout() {
        let log = TrainLog {
            records: vec![StepRecord {
                step: 0,
                mean_reward: 0.5,
                mean_cer: 0.25,
                mean_nll: 1.0,
                mean_sim: None,
                std_logf0: 0.125,
                nonterm_rate: 0.0,
                mean_len: 4.0,
            }],
        };
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRAIN_LOG_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "0,0.500000000,0.250000000,1.000000000,,0.125000000,0.000000000,4.000000000"
        );
    }
}
