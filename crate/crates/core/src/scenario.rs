//! Environment presets: vocabulary, prompt pools and the hand-built base
//! checkpoint that every experiment starts from and scores against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Prompt, PromptSet, Vocab};
use crate::policy::{FeatureMap, PolicyError, PolicyParams};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid environment spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

/// Reference speaker: a Gaussian bump of pitch-bin usage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerStyle {
    /// Centre bin; `None` places it at the base policy's resting pitch.
    pub center: Option<f64>,
    pub width: f64,
    /// Per-prompt uniform jitter of the centre, in bins.
    pub jitter: f64,
}

impl Default for SpeakerStyle {
    fn default() -> Self {
        Self {
            center: None,
            width: 1.8,
            jitter: 1.0,
        }
    }
}

/// Hand-set weights of the base checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseStyle {
    /// Logit bonus for the character under the text cursor.
    pub read_strength: f64,
    /// EOS logit once the cursor is past the end of the text.
    pub eos_at_end: f64,
    /// EOS logit while text remains.
    pub eos_in_text: f64,
    /// Quadratic penalty on pitch jumps, per squared bin.
    pub smoothness: f64,
    /// Resting pitch bin the first token gravitates to.
    pub rest_bin: f64,
    /// Quadratic penalty on the first token's distance from `rest_bin`.
    pub onset_strength: f64,
    /// Quadratic pull of every token toward `rest_bin`.
    pub range_strength: f64,
    /// EOS logit lost per squared bin the previous frame sits above
    /// `rest_bin`: utterances end on a falling pitch.
    pub final_lowering: f64,
}

impl Default for BaseStyle {
    fn default() -> Self {
        Self {
            read_strength: 5.0,
            eos_at_end: 7.0,
            eos_in_text: -6.0,
            smoothness: 0.3,
            rest_bin: 4.5,
            onset_strength: 0.15,
            range_strength: 0.02,
            final_lowering: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSpec {
    pub alphabet: String,
    pub n_bins: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub max_len: usize,
    pub n_prompts: usize,
    pub n_heldout: usize,
    pub min_text_len: usize,
    pub max_text_len: usize,
    pub prompt_buckets: usize,
    pub style: SpeakerStyle,
    pub seed: u64,
    pub base: BaseStyle,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            alphabet: "abcde".into(),
            n_bins: 10,
            f_min_hz: 80.0,
            f_max_hz: 300.0,
            max_len: 24,
            n_prompts: 64,
            n_heldout: 32,
            min_text_len: 3,
            max_text_len: 8,
            prompt_buckets: 64,
            style: SpeakerStyle::default(),
            seed: 7,
            base: BaseStyle::default(),
        }
    }
}

impl EnvSpec {
    /// Environment in which the speaker-similarity reward is exploitable.
    ///
    /// The reference speaker sits at the top of the pitch range, the base
    /// speaker only ends utterances from a low pitch, and texts nearly fill
    /// the length budget. Reaching the reference pitch makes EOS expensive
    /// under the scorer, while running into the length limit costs a single
    /// insertion on the longest texts.
    pub fn hackable() -> Self {
        let d = Self::default();
        Self {
            min_text_len: 19,
            max_text_len: 23,
            style: SpeakerStyle {
                center: Some(9.0),
                width: 1.0,
                jitter: 0.5,
            },
            base: BaseStyle {
                final_lowering: 1.0,
                ..d.base
            },
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() || self.n_bins == 0 {
            return Err(ScenarioError::Spec("empty alphabet or pitch bank".into()));
        }
        if self.min_text_len == 0 || self.min_text_len > self.max_text_len {
            return Err(ScenarioError::Spec("need 1 <= min_text_len <= max_text_len".into()));
        }
        if self.max_len <= self.max_text_len {
            return Err(ScenarioError::Spec("max_len must exceed max_text_len to leave room for EOS".into()));
        }
        if self.n_prompts == 0 {
            return Err(ScenarioError::Spec("n_prompts must be >= 1".into()));
        }
        Ok(())
    }
}

/// A built environment: vocabulary, training and held-out prompts, and the
/// base checkpoint.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: EnvSpec,
    pub vocab: Vocab,
    pub train: PromptSet,
    pub heldout: PromptSet,
    pub base: PolicyParams,
}

pub const BASE_VERSION: &str = "channel-base";

impl Scenario {
    pub fn build(spec: &EnvSpec) -> Result<Self> {
        spec.validate()?;
        let vocab = Vocab::geometric(&spec.alphabet, spec.n_bins, spec.f_min_hz, spec.f_max_hz)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let train = make_prompts(spec, &vocab, "p", spec.n_prompts, &mut rng)?;
        let heldout = make_prompts(spec, &vocab, "h", spec.n_heldout, &mut rng)?;
        let base = base_policy(spec, &vocab)?;
        Ok(Self {
            spec: spec.clone(),
            vocab,
            train,
            heldout,
            base,
        })
    }
}

fn make_prompts(spec: &EnvSpec, vocab: &Vocab, prefix: &str, n: usize, rng: &mut ChaCha8Rng) -> Result<PromptSet> {
    let chars = vocab.chars();
    let prompts = (0..n)
        .map(|i| {
            let len = rng.random_range(spec.min_text_len..=spec.max_text_len);
            let text: String = (0..len).map(|_| chars[rng.random_range(0..chars.len())]).collect();
            let profile = speaker_profile(spec, rng);
            let p = Prompt::from_profile(format!("{prefix}{i:03}"), text, &profile)?;
            vocab.check_prompt(&p)?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptSet::new(prompts)?)
}

fn speaker_profile(spec: &EnvSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let style = spec.style;
    let center = style.center.unwrap_or(spec.base.rest_bin) + style.jitter * rng.random_range(-0.5..0.5);
    (0..spec.n_bins)
        .map(|b| {
            let d = b as f64 - center;
            (-d * d / (2.0 * style.width * style.width)).exp()
        })
        .collect()
}

/// The pre-RL checkpoint: reads the text under the cursor, stops after it,
/// and walks smoothly around a resting pitch.
pub fn base_policy(spec: &EnvSpec, vocab: &Vocab) -> Result<PolicyParams> {
    let fm = FeatureMap::for_vocab(vocab, spec.max_len, spec.prompt_buckets);
    let style = spec.base;
    let n_chars = vocab.chars().len();
    let n_bins = vocab.n_bins();
    let eos = vocab.eos() as usize;
    let mut params = PolicyParams::zeros(fm.clone(), BASE_VERSION)?;

    let cursor = 1 + spec.prompt_buckets;
    let prev_token = cursor + n_chars + 1;
    let prev_pitch = prev_token + vocab.size() + 1;

    for c in 0..n_chars {
        let row = params.row_mut(cursor + c);
        for b in 0..n_bins {
            row[vocab.token_for(c, b) as usize] = style.read_strength;
        }
        row[eos] = style.eos_in_text;
    }
    params.row_mut(cursor + n_chars)[eos] = style.eos_at_end;

    let pitch_row = |row: &mut [f64], f: &dyn Fn(usize) -> f64| {
        for c in 0..n_chars {
            for b in 0..n_bins {
                row[vocab.token_for(c, b) as usize] += f(b);
            }
        }
    };
    pitch_row(params.row_mut(0), &|b| {
        let d = b as f64 - style.rest_bin;
        -style.range_strength * d * d
    });
    for from in 0..n_bins {
        let row = params.row_mut(prev_pitch + from);
        pitch_row(row, &|b| {
            let d = b as f64 - from as f64;
            -style.smoothness * d * d
        });
        let above = (from as f64 - style.rest_bin).max(0.0);
        row[eos] = -style.final_lowering * above * above;
    }
    pitch_row(params.row_mut(prev_pitch + n_bins), &|b| {
        let d = b as f64 - style.rest_bin;
        -style.onset_strength * d * d
    });
    debug_assert_eq!(params.rows(), fm.dimension());
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self};

    #[test]
    fn build_is_deterministic() {
        let a = Scenario::build(&EnvSpec::default()).unwrap();
        let b = Scenario::build(&EnvSpec::default()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.base.hash(), b.base.hash());
        assert_eq!(a.vocab.size(), 51);
        assert_eq!(a.train.len(), 64);
        assert!(a.train.iter().all(|p| (3..=8).contains(&p.target_text.len())));
    }

    #[test]
    fn base_reads_text_and_terminates() {
        let s = Scenario::build(&EnvSpec::default()).unwrap();
        let mut cer = 0.0;
        let mut open = 0;
        let mut n = 0;
        for (i, p) in s.train.iter().enumerate() {
            for k in 0..4 {
                let c = s.base.sample(p, 1.0, s.spec.max_len, (i * 10 + k) as u64).unwrap();
                cer += crate::reward::cer(&p.target_text, &env::transcript(&c, &s.vocab).unwrap()).unwrap();
                open += usize::from(!c.terminated);
                n += 1;
            }
        }
        assert!(cer / (n as f64) < 0.1, "base CER {}", cer / n as f64);
        assert_eq!(open, 0);
    }

    #[test]
    fn spec_validation() {
        let mut s = EnvSpec::default();
        s.max_len = 8;
        assert!(s.validate().is_err());
        s = EnvSpec::default();
        s.min_text_len = 0;
        assert!(s.validate().is_err());
    }
}
