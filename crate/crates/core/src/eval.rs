//! Fixed-seed evaluation of a checkpoint on a prompt pool.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotator::{JudgeError, Judgment, PreferenceJudge};
use crate::derive_seed;
use crate::env::{self, Candidate, EnvError, Prompt, Vocab};
use crate::policy::{PolicyError, PolicyParams};
use crate::reward;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub mean_cer: f64,
    pub std_logf0: f64,
    pub nonterm_rate: f64,
    pub mean_len: f64,
    /// Mean speaker similarity over candidates with at least one voiced token.
    pub mean_sim: f64,
}

/// How candidates are drawn for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub samples_per_prompt: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            samples_per_prompt: 8,
            temperature: 1.0,
            max_len: 24,
            seed: 0x5eed,
        }
    }
}

pub fn sample_pool(params: &PolicyParams, prompts: &[Prompt], spec: &EvalSpec) -> Result<Vec<Candidate>, PolicyError> {
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|i| (0..spec.samples_per_prompt).map(move |k| (i, k)))
        .collect();
    jobs.par_iter()
        .map(|&(i, k)| {
            params.sample(
                &prompts[i],
                spec.temperature,
                spec.max_len,
                derive_seed(spec.seed, &[i as u64, k as u64]),
            )
        })
        .collect()
}

/// Summary statistics of `candidates`, matched to `prompts` by id.
pub fn summarize(candidates: &[Candidate], prompts: &[Prompt], vocab: &Vocab) -> Result<EvalSummary, EnvError> {
    let find = |id: &str| {
        prompts
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| EnvError::BadCandidate(format!("unknown prompt {id}")))
    };
    let mut cer = 0.0;
    let mut open = 0usize;
    let mut len = 0usize;
    let mut sim = 0.0;
    let mut voiced = 0usize;
    let mut contours = Vec::with_capacity(candidates.len());
    for c in candidates {
        let p = find(&c.prompt_id)?;
        cer += reward::cer(&p.target_text, &env::transcript(c, vocab)?)?;
        open += usize::from(!c.terminated);
        len += c.token_ids.len();
        match env::speaker_similarity(c, p, vocab) {
            Ok(s) => {
                sim += s;
                voiced += 1;
            }
            Err(EnvError::EmptyCandidate) => {}
            Err(e) => return Err(e),
        }
        contours.push(env::pitch_contour(c, vocab)?);
    }
    let n = candidates.len().max(1) as f64;
    Ok(EvalSummary {
        n: candidates.len(),
        mean_cer: cer / n,
        std_logf0: env::prosody_stats(&contours)?.std_logf0,
        nonterm_rate: open as f64 / n,
        mean_len: len as f64 / n,
        mean_sim: if voiced == 0 { 0.0 } else { sim / voiced as f64 },
    })
}

pub fn evaluate(params: &PolicyParams, prompts: &[Prompt], vocab: &Vocab, spec: &EvalSpec) -> Result<EvalSummary, EnvError> {
    let c = sample_pool(params, prompts, spec).map_err(|e| EnvError::Policy(Box::new(e)))?;
    summarize(&c, prompts, vocab)
}

/// Outcome counts of `a` against `b` under a judge.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadToHead {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

impl HeadToHead {
    pub fn total(&self) -> usize {
        self.wins + self.losses + self.ties
    }

    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.total().max(1) as f64
    }
}

/// Draws `n` (a, b) pairs, cycling through `prompts`, and judges each.
///
/// A candidate with no voiced tokens cannot be judged; it loses to any
/// judgeable candidate and ties with another empty one.
pub fn head_to_head(
    a: &PolicyParams,
    b: &PolicyParams,
    prompts: &[Prompt],
    n: usize,
    spec: &EvalSpec,
    judge: &mut dyn PreferenceJudge,
) -> Result<HeadToHead, JudgeError> {
    let mut out = HeadToHead::default();
    let policy_err = |e: PolicyError| JudgeError::Env(EnvError::Policy(Box::new(e)));
    for i in 0..n {
        let prompt = &prompts[i % prompts.len()];
        let ca = a
            .sample(prompt, spec.temperature, spec.max_len, derive_seed(spec.seed, &[i as u64, 0]))
            .map_err(policy_err)?;
        let cb = b
            .sample(prompt, spec.temperature, spec.max_len, derive_seed(spec.seed, &[i as u64, 1]))
            .map_err(policy_err)?;
        let verdict = match (ca.voiced_len(), cb.voiced_len()) {
            (0, 0) => Judgment::Tie,
            (0, _) => Judgment::PreferB,
            (_, 0) => Judgment::PreferA,
            _ => judge.judge(prompt, &ca, &cb)?,
        };
        match verdict {
            Judgment::PreferA => out.wins += 1,
            Judgment::PreferB => out.losses += 1,
            Judgment::Tie => out.ties += 1,
        }
    }
    Ok(out)
}
