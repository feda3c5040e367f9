//! Simulated preference judge.
//!
//! The rule is lexicographic: an intelligibility gate on CER, then pitch
//! dispersion of each candidate, then CER again when both fail the gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, Candidate, EnvError, Prompt, Vocab};
use crate::reward::{self, RewardError};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("invalid oracle config: {0}")]
    Config(String),
    #[error("cannot judge an empty candidate")]
    EmptyCandidate,
    #[error("candidates belong to prompts {a} and {b}, expected {expected}")]
    PromptMismatch { a: String, b: String, expected: String },
    #[error("judge unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

pub type Result<T> = std::result::Result<T, JudgeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Judgment {
    PreferA,
    PreferB,
    Tie,
}

impl Judgment {
    pub fn flipped(self) -> Self {
        match self {
            Self::PreferA => Self::PreferB,
            Self::PreferB => Self::PreferA,
            Self::Tie => Self::Tie,
        }
    }
}

/// Where a preference label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    Oracle,
    Human,
}

/// Anything that can label an (A, B) pair for one prompt.
pub trait PreferenceJudge {
    fn judge(&mut self, prompt: &Prompt, a: &Candidate, b: &Candidate) -> Result<Judgment>;
    fn source(&self) -> PairSource;
    fn annotator_id(&self) -> &str;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub cer_gate: f64,
    /// Scale on the dispersion score. Positive scaling leaves every decision
    /// unchanged; it only shows up in [`Assessment::score`].
    pub dispersion_weight: f64,
    pub noise_prob: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            cer_gate: 0.3,
            dispersion_weight: 1.0,
            noise_prob: 0.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cer_gate >= 0.0 && self.cer_gate.is_finite()) {
            return Err(JudgeError::Config("cer_gate must be a non-negative number".into()));
        }
        if !(self.dispersion_weight > 0.0 && self.dispersion_weight.is_finite()) {
            return Err(JudgeError::Config("dispersion_weight must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.noise_prob) {
            return Err(JudgeError::Config("noise_prob must be in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// What the oracle looks at in one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub cer: f64,
    pub std_logf0: f64,
    pub score: f64,
}

pub fn assess(candidate: &Candidate, prompt: &Prompt, vocab: &Vocab, cfg: &OracleConfig) -> Result<Assessment> {
    let contour = env::pitch_contour(candidate, vocab)?;
    if contour.is_empty() {
        return Err(JudgeError::EmptyCandidate);
    }
    let cer = reward::cer(&prompt.target_text, &env::transcript(candidate, vocab)?)?;
    let std_logf0 = env::prosody_stats(&[contour])?.std_logf0;
    Ok(Assessment {
        cer,
        std_logf0,
        score: cfg.dispersion_weight * std_logf0,
    })
}

/// The noise-free decision rule.
pub fn decide(a: &Assessment, b: &Assessment, cer_gate: f64) -> Judgment {
    let pass_a = a.cer <= cer_gate;
    let pass_b = b.cer <= cer_gate;
    let strictly = |x: f64, y: f64| {
        if x > y {
            Judgment::PreferA
        } else if y > x {
            Judgment::PreferB
        } else {
            Judgment::Tie
        }
    };
    match (pass_a, pass_b) {
        (true, false) => Judgment::PreferA,
        (false, true) => Judgment::PreferB,
        (true, true) => strictly(a.score, b.score),
        (false, false) => strictly(b.cer, a.cer),
    }
}

/// The simulated rater.
#[derive(Debug, Clone)]
pub struct Oracle {
    cfg: OracleConfig,
    vocab: Vocab,
    rng: ChaCha8Rng,
    id: String,
}

impl Oracle {
    pub fn new(cfg: OracleConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            id: format!("oracle-gate{}-noise{}", cfg.cer_gate, cfg.noise_prob),
            cfg,
            vocab,
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }
}

impl PreferenceJudge for Oracle {
    fn judge(&mut self, prompt: &Prompt, a: &Candidate, b: &Candidate) -> Result<Judgment> {
        for c in [a, b] {
            if c.prompt_id != prompt.id {
                return Err(JudgeError::PromptMismatch {
                    a: a.prompt_id.clone(),
                    b: b.prompt_id.clone(),
                    expected: prompt.id.clone(),
                });
            }
        }
        let sa = assess(a, prompt, &self.vocab, &self.cfg)?;
        let sb = assess(b, prompt, &self.vocab, &self.cfg)?;
        let j = decide(&sa, &sb, self.cfg.cer_gate);
        if j != Judgment::Tie && self.cfg.noise_prob > 0.0 && self.rng.random::<f64>() < self.cfg.noise_prob {
            return Ok(j.flipped());
        }
        Ok(j)
    }

    fn source(&self) -> PairSource {
        PairSource::Oracle
    }

    fn annotator_id(&self) -> &str {
        &self.id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::geometric("ab", 4, 100.0, 200.0).unwrap()
    }

    fn prompt() -> Prompt {
        Prompt::new("p", "abab", vec![0.5; 4]).unwrap()
    }

    fn cand(v: &Vocab, chars: &str, bins: &[usize]) -> Candidate {
        let mut ids: Vec<u32> = chars
            .chars()
            .zip(bins)
            .map(|(c, &b)| v.token_for(v.char_index(c).unwrap(), b))
            .collect();
        ids.push(v.eos());
        Candidate {
            prompt_id: "p".into(),
            token_logprobs: vec![0.0; ids.len()],
            token_ids: ids,
            terminated: true,
            seed: 0,
        }
    }

    fn oracle() -> Oracle {
        Oracle::new(OracleConfig::default(), vocab()).unwrap()
    }

    #[test]
    fn dispersion_decides_when_both_pass() {
        let v = vocab();
        let lively = cand(&v, "abab", &[0, 3, 0, 3]);
        let flat = cand(&v, "abab", &[1, 1, 1, 2]);
        assert_eq!(oracle().judge(&prompt(), &lively, &flat).unwrap(), Judgment::PreferA);
        assert_eq!(oracle().judge(&prompt(), &flat, &lively).unwrap(), Judgment::PreferB);
    }

    #[test]
    fn gate_beats_dispersion() {
        let v = vocab();
        let garbled = cand(&v, "bbab", &[0, 3, 0, 3]);
        let a = assess(&garbled, &prompt(), &v, &OracleConfig::default()).unwrap();
        assert!(a.cer > 0.0);
        let mut cfg = OracleConfig::default();
        cfg.cer_gate = 0.2;
        let mut o = Oracle::new(cfg, v.clone()).unwrap();
        let flat = cand(&v, "abab", &[1, 1, 1, 1]);
        assert_eq!(o.judge(&prompt(), &garbled, &flat).unwrap(), Judgment::PreferB);
    }

    #[test]
    fn both_failing_prefers_lower_cer() {
        let a = Assessment {
            cer: 0.5,
            std_logf0: 0.9,
            score: 0.9,
        };
        let b = Assessment {
            cer: 0.0,
            std_logf0: 0.0,
            score: 0.0,
        };
        assert_eq!(decide(&a, &b, 0.3), Judgment::PreferB);
        let c = Assessment {
            cer: 0.8,
            std_logf0: 0.0,
            score: 0.0,
        };
        assert_eq!(decide(&a, &c, 0.3), Judgment::PreferA);
        assert_eq!(decide(&a, &a, 0.3), Judgment::Tie);
    }

    #[test]
    fn identical_is_tie_and_empty_is_error() {
        let v = vocab();
        let c = cand(&v, "abab", &[0, 1, 2, 3]);
        assert_eq!(oracle().judge(&prompt(), &c, &c).unwrap(), Judgment::Tie);
        let empty = cand(&v, "", &[]);
        assert!(matches!(oracle().judge(&prompt(), &c, &empty), Err(JudgeError::EmptyCandidate)));
    }

    #[test]
    fn config_bounds() {
        let mut c = OracleConfig::default();
        c.noise_prob = 0.5;
        assert!(c.validate().is_err());
        c.noise_prob = 0.1;
        c.dispersion_weight = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn noise_flips_at_the_configured_rate() {
        let v = vocab();
        let lively = cand(&v, "abab", &[0, 3, 0, 3]);
        let flat = cand(&v, "abab", &[1, 1, 1, 1]);
        let cfg = OracleConfig {
            noise_prob: 0.2,
            seed: 9,
            ..OracleConfig::default()
        };
        let mut o = Oracle::new(cfg, v).unwrap();
        let n = 5000;
        let flips = (0..n)
            .filter(|_| o.judge(&prompt(), &lively, &flat).unwrap() == Judgment::PreferB)
            .count();
        let rate = flips as f64 / n as f64;
        // 0.2 ± 4 standard errors
        assert!((rate - 0.2).abs() < 4.0 * (0.2f64 * 0.8 / n as f64).sqrt(), "{rate}");
    }

    proptest! {
        #[test]
        fn antisymmetric_without_noise(
            ca in 0.0f64..1.0, sa in 0.0f64..1.0, cb in 0.0f64..1.0, sb in 0.0f64..1.0, gate in 0.0f64..1.0,
        ) {
            let a = Assessment { cer: ca, std_logf0: sa, score: sa };
            let b = Assessment { cer: cb, std_logf0: sb, score: sb };
            prop_assert_eq!(decide(&a, &b, gate), decide(&b, &a, gate).flipped());
        }

        #[test]
        fn gate_dominates(ca in 0.0f64..0.3, cb in 0.30001f64..3.0, sa in 0.0f64..1.0, sb in 0.0f64..5.0) {
            let a = Assessment { cer: ca, std_logf0: sa, score: sa };
            let b = Assessment { cer: cb, std_logf0: sb, score: sb };
            prop_assert_eq!(decide(&a, &b, 0.3), Judgment::PreferA);
        }
    }
}
