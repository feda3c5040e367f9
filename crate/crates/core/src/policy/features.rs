use serde::{Deserialize, Serialize};

use crate::env::{Prompt, TokenId, Vocab};

use super::{PolicyError, Result};

/// Upper bound on simultaneously active features.
pub const MAX_ACTIVE: usize = 6;

/// Position buckets: first step, interior, and the last two steps before the
/// length limit.
pub const POSITION_BUCKETS: usize = 3;

/// Deterministic binary feature map over `(prompt, prefix, position)`.
///
/// Blocks, in order:
///
/// | block        | size             | active index                                  |
/// |--------------|------------------|-----------------------------------------------|
/// | bias         | 1                | always                                        |
/// | prompt       | `prompt_buckets` | FNV-1a hash of the prompt id                  |
/// | text cursor  | `chars + 1`      | target character at `position`, or past-end   |
/// | prev token   | `vocab + 1`      | previous token, or begin-of-sequence          |
/// | prev pitch   | `bins + 1`       | previous pitch bin, or begin-of-sequence      |
/// | position     | 3                | begin / middle / near-max                     |
///
/// The cursor and prev-pitch blocks can be switched off.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub alphabet: Vec<char>,
    pub n_bins: usize,
    pub max_len: usize,
    pub prompt_buckets: usize,
    pub text_cursor: bool,
    pub prev_pitch: bool,
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    prompt: usize,
    cursor: usize,
    prev_token: usize,
    prev_pitch: usize,
    position: usize,
    dim: usize,
}

/// Indices of the active (value 1.0) features of one state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveFeatures {
    idx: [usize; MAX_ACTIVE],
    len: usize,
}

impl ActiveFeatures {
    fn push(&mut self, i: usize) {
        self.idx[self.len] = i;
        self.len += 1;
    }
}

impl std::ops::Deref for ActiveFeatures {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.idx[..self.len]
    }
}

/// Per-prompt values reused across every step of a sequence.
#[derive(Debug, Clone)]
pub struct PromptContext {
    bucket: Option<usize>,
    text: Vec<usize>,
}

impl FeatureMap {
    /// Full feature map for a vocabulary.
    pub fn for_vocab(vocab: &Vocab, max_len: usize, prompt_buckets: usize) -> Self {
        Self {
            alphabet: vocab.chars().to_vec(),
            n_bins: vocab.n_bins(),
            max_len,
            prompt_buckets,
            text_cursor: true,
            prev_pitch: true,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len() * self.n_bins + 1
    }

    pub fn eos(&self) -> TokenId {
        (self.vocab_size() - 1) as TokenId
    }

    fn offsets(&self) -> Offsets {
        let prompt = 1;
        let cursor = prompt + self.prompt_buckets;
        let prev_token = cursor + if self.text_cursor { self.alphabet.len() + 1 } else { 0 };
        let prev_pitch = prev_token + self.vocab_size() + 1;
        let position = prev_pitch + if self.prev_pitch { self.n_bins + 1 } else { 0 };
        Offsets {
            prompt,
            cursor,
            prev_token,
            prev_pitch,
            position,
            dim: position + POSITION_BUCKETS,
        }
    }

    pub fn dimension(&self) -> usize {
        self.offsets().dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() || self.n_bins == 0 || self.max_len == 0 {
            return Err(PolicyError::BadFeatureMap(
                "alphabet, pitch bins and max_len must be non-empty".into(),
            ));
        }
        Ok(())
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if vocab.chars() != self.alphabet.as_slice() || vocab.n_bins() != self.n_bins {
            return Err(PolicyError::BadFeatureMap("feature map does not match vocabulary".into()));
        }
        Ok(())
    }

    pub fn context(&self, prompt: &Prompt) -> Result<PromptContext> {
        let text = prompt
            .target_text
            .chars()
            .map(|c| {
                self.alphabet
                    .iter()
                    .position(|&a| a == c)
                    .ok_or_else(|| PolicyError::BadPrompt(format!("character {c:?} not in alphabet")))
            })
            .collect::<Result<Vec<_>>>()?;
        let bucket = (self.prompt_buckets > 0).then(|| (fnv1a(prompt.id.as_bytes()) % self.prompt_buckets as u64) as usize);
        Ok(PromptContext { bucket, text })
    }

    /// Active features for the state after emitting `prev` at `position`.
    pub fn active(&self, ctx: &PromptContext, prev: Option<TokenId>, position: usize) -> ActiveFeatures {
        let off = self.offsets();
        let mut a = ActiveFeatures {
            idx: [0; MAX_ACTIVE],
            len: 0,
        };
        a.push(0);
        if let Some(b) = ctx.bucket {
            a.push(off.prompt + b);
        }
        if self.text_cursor {
            let slot = ctx.text.get(position).copied().unwrap_or(self.alphabet.len());
            a.push(off.cursor + slot);
        }
        let vocab = self.vocab_size();
        a.push(off.prev_token + prev.map_or(vocab, |t| t as usize));
        if self.prev_pitch {
            let slot = prev.map_or(self.n_bins, |t| t as usize % self.n_bins);
            a.push(off.prev_pitch + slot);
        }
        let bucket = if position == 0 {
            0
        } else if position + 2 >= self.max_len {
            2
        } else {
            1
        };
        a.push(off.position + bucket);
        a
    }
}

/// 64-bit FNV-1a; stable across platforms and runs.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> FeatureMap {
        FeatureMap {
            alphabet: vec!['a', 'b'],
            n_bins: 3,
            max_len: 6,
            prompt_buckets: 4,
            text_cursor: true,
            prev_pitch: true,
        }
    }

    #[test]
    fn dimension_counts_every_block() {
        // bias 1 + prompt 4 + cursor 3 + prev token 8 + prev pitch 4 + position 3
        assert_eq!(map().dimension(), 23);
        let mut m = map();
        m.text_cursor = false;
        m.prev_pitch = false;
        m.prompt_buckets = 0;
        assert_eq!(m.dimension(), 1 + 8 + 3);
    }

    #[test]
    fn active_features_are_deterministic_and_in_range() {
        let m = map();
        let p = Prompt::new("p1", "ab", vec![1.0, 0.0, 0.0]).unwrap();
        let ctx = m.context(&p).unwrap();
        for pos in 0..m.max_len {
            for prev in [None, Some(0), Some(5)] {
                let a = m.active(&ctx, prev, pos);
                assert_eq!(a, m.active(&ctx, prev, pos));
                assert!(!a.is_empty());
                assert!(a.iter().all(|&i| i < m.dimension()));
                let mut sorted = a.to_vec();
                sorted.dedup();
                assert_eq!(sorted.len(), a.len());
            }
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
