//! Linear-softmax autoregressive policy with exact log-likelihoods and
//! gradients.
//!
//! Logits at each step are `features · W`, where the features are binary
//! (see [`FeatureMap`]) and `W` is a `[dimension × vocab]` row-major matrix.
//! For a sequence `y`,
//!
//! ```text
//! ∇_W log π(y) = Σ_t feat_t ⊗ (onehot(y_t) − softmax_t)
//! ```

mod checkpoint;
mod features;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use features::{fnv1a, ActiveFeatures, FeatureMap, PromptContext, MAX_ACTIVE, POSITION_BUCKETS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{Candidate, Prompt, TokenId};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid feature map: {0}")]
    BadFeatureMap(String),
    #[error("weight matrix has {got} entries, expected {expected}")]
    Shape { got: usize, expected: usize },
    #[error("non-finite weight at index {0}")]
    NonFinite(usize),
    #[error("prompt not representable: {0}")]
    BadPrompt(String),
    #[error("EOS inside prefix at position {0}")]
    EosInPrefix(usize),
    #[error("malformed candidate: {0}")]
    BadCandidate(String),
    #[error("sampling temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// An immutable parameter snapshot. Trainers produce new snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    features: FeatureMap,
    weights: Vec<f64>,
    version: String,
}

impl PolicyParams {
    pub fn zeros(features: FeatureMap, version: impl Into<String>) -> Result<Self> {
        features.validate()?;
        let n = features.dimension() * features.vocab_size();
        Ok(Self {
            features,
            weights: vec![0.0; n],
            version: version.into(),
        })
    }

    pub fn from_weights(features: FeatureMap, weights: Vec<f64>, version: impl Into<String>) -> Result<Self> {
        features.validate()?;
        let expected = features.dimension() * features.vocab_size();
        if weights.len() != expected {
            return Err(PolicyError::Shape {
                got: weights.len(),
                expected,
            });
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(PolicyError::NonFinite(i));
        }
        Ok(Self {
            features,
            weights,
            version: version.into(),
        })
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rows(&self) -> usize {
        self.features.dimension()
    }

    pub fn cols(&self) -> usize {
        self.features.vocab_size()
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn with_version(mut self, version: impl Into<String>) -> Self {
        self.version = version.into();
        self
    }

    pub fn row_mut(&mut self, feature: usize) -> &mut [f64] {
        let v = self.cols();
        &mut self.weights[feature * v..(feature + 1) * v]
    }

    /// Returns `self + scale · direction`, rejecting non-finite results.
    pub fn stepped(&self, direction: &[f64], scale: f64) -> Result<Self> {
        if direction.len() != self.weights.len() {
            return Err(PolicyError::Shape {
                got: direction.len(),
                expected: self.weights.len(),
            });
        }
        let weights: Vec<f64> = self.weights.iter().zip(direction).map(|(w, d)| w + scale * d).collect();
        Self::from_weights(self.features.clone(), weights, self.version.clone())
    }

    /// SHA-256 of the checkpoint encoding, lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(encode_checkpoint(self));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn logits_into(&self, active: &[usize], out: &mut [f64]) {
        let v = self.cols();
        out.fill(0.0);
        for &f in active {
            for (o, w) in out.iter_mut().zip(&self.weights[f * v..(f + 1) * v]) {
                *o += w;
            }
        }
    }

    /// Logits of the next token after `prefix` (position = `prefix.len()`).
    pub fn step_logits(&self, prompt: &Prompt, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let eos = self.features.eos();
        if let Some(i) = prefix.iter().position(|&t| t == eos) {
            return Err(PolicyError::EosInPrefix(i));
        }
        if let Some(&t) = prefix.iter().find(|&&t| t > eos) {
            return Err(PolicyError::BadCandidate(format!("unknown token {t}")));
        }
        let ctx = self.features.context(prompt)?;
        let active = self.features.active(&ctx, prefix.last().copied(), prefix.len());
        let mut out = vec![0.0; self.cols()];
        self.logits_into(&active, &mut out);
        Ok(out)
    }

    fn check_candidate(&self, candidate: &Candidate) -> Result<()> {
        let eos = self.features.eos();
        let n = candidate.token_ids.len();
        for (i, &t) in candidate.token_ids.iter().enumerate() {
            if t > eos {
                return Err(PolicyError::BadCandidate(format!("unknown token {t}")));
            }
            if t == eos && i + 1 != n {
                return Err(PolicyError::BadCandidate("token after EOS".into()));
            }
        }
        let ends_with_eos = candidate.token_ids.last() == Some(&eos);
        if candidate.terminated != ends_with_eos {
            return Err(PolicyError::BadCandidate("termination flag disagrees with final token".into()));
        }
        Ok(())
    }

    /// Visits every step of `candidate` with its active features and
    /// log-softmax row.
    fn for_each_step(&self, prompt: &Prompt, candidate: &Candidate, mut visit: impl FnMut(&ActiveFeatures, &[f64], TokenId)) -> Result<()> {
        self.check_candidate(candidate)?;
        let ctx = self.features.context(prompt)?;
        let mut logits = vec![0.0; self.cols()];
        let mut prev = None;
        for (pos, &tok) in candidate.token_ids.iter().enumerate() {
            let active = self.features.active(&ctx, prev, pos);
            self.logits_into(&active, &mut logits);
            log_softmax_in_place(&mut logits);
            visit(&active, &logits, tok);
            prev = Some(tok);
        }
        Ok(())
    }

    /// Per-step log-probabilities of the candidate's tokens.
    pub fn step_logprobs(&self, prompt: &Prompt, candidate: &Candidate) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(candidate.token_ids.len());
        self.for_each_step(prompt, candidate, |_, logp, tok| out.push(logp[tok as usize]))?;
        Ok(out)
    }

    pub fn sequence_logprob(&self, prompt: &Prompt, candidate: &Candidate) -> Result<f64> {
        let mut total = 0.0;
        self.for_each_step(prompt, candidate, |_, logp, tok| total += logp[tok as usize])?;
        Ok(total)
    }

    /// Adds `scale · ∇ log π(candidate)` into `out` and returns `log π(candidate)`.
    pub fn accumulate_logprob_grad(&self, prompt: &Prompt, candidate: &Candidate, scale: f64, out: &mut [f64]) -> Result<f64> {
        if out.len() != self.weights.len() {
            return Err(PolicyError::Shape {
                got: out.len(),
                expected: self.weights.len(),
            });
        }
        let v = self.cols();
        let mut total = 0.0;
        self.for_each_step(prompt, candidate, |active, logp, tok| {
            total += logp[tok as usize];
            for &f in active.iter() {
                let row = &mut out[f * v..(f + 1) * v];
                for (k, g) in row.iter_mut().enumerate() {
                    *g -= scale * logp[k].exp();
                }
                row[tok as usize] += scale;
            }
        })?;
        Ok(total)
    }

    pub fn grad_sequence_logprob(&self, prompt: &Prompt, candidate: &Candidate) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.weights.len()];
        self.accumulate_logprob_grad(prompt, candidate, 1.0, &mut g)?;
        Ok(g)
    }

    /// Adds `scale · ∇ Σ_t KL(π(·|s_t) ‖ reference(·|s_t))` over the states
    /// visited by `candidate` (states held fixed) and returns the KL sum.
    pub fn accumulate_kl_grad(
        &self,
        reference: &PolicyParams,
        prompt: &Prompt,
        candidate: &Candidate,
        scale: f64,
        out: &mut [f64],
    ) -> Result<f64> {
        if reference.features != self.features {
            return Err(PolicyError::BadFeatureMap("reference policy has a different feature map".into()));
        }
        let v = self.cols();
        let mut ref_logits = vec![0.0; v];
        let mut total = 0.0;
        self.for_each_step(prompt, candidate, |active, logp, _| {
            reference.logits_into(active, &mut ref_logits);
            log_softmax_in_place(&mut ref_logits);
            let kl: f64 = logp.iter().zip(&ref_logits).map(|(p, q)| p.exp() * (p - q)).sum();
            total += kl;
            for &f in active.iter() {
                let row = &mut out[f * v..(f + 1) * v];
                for k in 0..v {
                    row[k] += scale * logp[k].exp() * ((logp[k] - ref_logits[k]) - kl);
                }
            }
        })?;
        Ok(total)
    }

    /// Samples autoregressively from the tempered softmax until EOS or
    /// `max_len` tokens. Recorded log-probabilities are untempered.
    pub fn sample(&self, prompt: &Prompt, temperature: f64, max_len: usize, seed: u64) -> Result<Candidate> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(PolicyError::BadTemperature(temperature));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.decode(prompt, max_len, seed, |logp| {
            let mut probs: Vec<f64> = logp.iter().map(|l| l / temperature).collect();
            softmax_in_place(&mut probs);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return k;
                }
            }
            // u landed in the rounding gap above the last partial sum.
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
        })
    }

    /// Argmax decoding, the temperature → 0 limit of [`Self::sample`].
    pub fn greedy(&self, prompt: &Prompt, max_len: usize) -> Result<Candidate> {
        self.decode(prompt, max_len, 0, argmax)
    }

    fn decode(&self, prompt: &Prompt, max_len: usize, seed: u64, mut pick: impl FnMut(&[f64]) -> usize) -> Result<Candidate> {
        if max_len == 0 {
            return Err(PolicyError::ZeroMaxLen);
        }
        let ctx = self.features.context(prompt)?;
        let eos = self.features.eos();
        let mut logits = vec![0.0; self.cols()];
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut terminated = false;
        while tokens.len() < max_len {
            let active = self.features.active(&ctx, tokens.last().copied(), tokens.len());
            self.logits_into(&active, &mut logits);
            log_softmax_in_place(&mut logits);
            let tok = pick(&logits);
            tokens.push(tok as TokenId);
            logprobs.push(logits[tok]);
            if tok as TokenId == eos {
                terminated = true;
                break;
            }
        }
        Ok(Candidate {
            prompt_id: prompt.id.clone(),
            token_ids: tokens,
            terminated,
            token_logprobs: logprobs,
            seed,
        })
    }
}

pub fn log_softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in x.iter_mut() {
        *v -= lse;
    }
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// First index of the maximum.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}
