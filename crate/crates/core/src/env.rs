//! Synthetic speech-token environment.
//!
//! Every non-EOS token carries one character and one quantized pitch, so a
//! sampled sequence has an exact transcript (for CER), an exact log-pitch
//! contour (for prosody statistics) and a pitch-bin usage histogram that
//! acts as its speaker embedding.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PolicyError, PolicyParams};
use crate::reward::{self, Metrics, RewardError};

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown token id {0}")]
    UnknownToken(TokenId),
    #[error("invalid vocabulary: {0}")]
    BadVocab(String),
    #[error("invalid prompt {id}: {reason}")]
    BadPrompt { id: String, reason: String },
    #[error("malformed candidate: {0}")]
    BadCandidate(String),
    #[error("candidate has no voiced tokens")]
    EmptyCandidate,
    #[error("no voiced frames in any contour")]
    NoVoicedFrames,
    #[error("embedding dimension {got} does not match {expected} pitch bins")]
    EmbeddingDim { got: usize, expected: usize },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Policy(#[from] Box<PolicyError>),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("record parse error on line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDef {
    pub id: TokenId,
    pub ch: Option<char>,
    pub pitch_hz: Option<f64>,
    pub is_eos: bool,
}

/// Cross product of an alphabet and a pitch-bin bank, plus one EOS token.
///
/// Token `c * n_bins + b` is character `c` at pitch bin `b`; the EOS token
/// has the last id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
    pitch_bins: Vec<f64>,
    tokens: Vec<TokenDef>,
}

impl Vocab {
    pub fn new(chars: Vec<char>, pitch_bins: Vec<f64>) -> Result<Self> {
        if chars.is_empty() || pitch_bins.is_empty() {
            return Err(EnvError::BadVocab("alphabet and pitch bank must be non-empty".into()));
        }
        let mut seen = chars.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != chars.len() {
            return Err(EnvError::BadVocab("duplicate characters in alphabet".into()));
        }
        if pitch_bins.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
            return Err(EnvError::BadVocab("pitch bins must be positive".into()));
        }
        if pitch_bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EnvError::BadVocab("pitch bins must be strictly increasing".into()));
        }
        let mut tokens = Vec::with_capacity(chars.len() * pitch_bins.len() + 1);
        for &ch in &chars {
            for &hz in &pitch_bins {
                tokens.push(TokenDef {
                    id: tokens.len() as TokenId,
                    ch: Some(ch),
                    pitch_hz: Some(hz),
                    is_eos: false,
                });
            }
        }
        tokens.push(TokenDef {
            id: tokens.len() as TokenId,
            ch: None,
            pitch_hz: None,
            is_eos: true,
        });
        Ok(Self { chars, pitch_bins, tokens })
    }

    /// `n_bins` pitch bins spaced geometrically over `[f_min, f_max]`.
    pub fn geometric(alphabet: &str, n_bins: usize, f_min: f64, f_max: f64) -> Result<Self> {
        if n_bins == 0 || !(f_min > 0.0 && f_max > f_min) {
            return Err(EnvError::BadVocab("need n_bins >= 1 and 0 < f_min < f_max".into()));
        }
        let bins = if n_bins == 1 {
            vec![f_min]
        } else {
            let ratio = (f_max / f_min).ln() / (n_bins - 1) as f64;
            (0..n_bins).map(|i| f_min * (ratio * i as f64).exp()).collect()
        };
        Self::new(alphabet.chars().collect(), bins)
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn pitch_bins(&self) -> &[f64] {
        &self.pitch_bins
    }

    pub fn tokens(&self) -> &[TokenDef] {
        &self.tokens
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_bins(&self) -> usize {
        self.pitch_bins.len()
    }

    pub fn eos(&self) -> TokenId {
        (self.tokens.len() - 1) as TokenId
    }

    pub fn is_eos(&self, id: TokenId) -> bool {
        id == self.eos()
    }

    pub fn token(&self, id: TokenId) -> Result<&TokenDef> {
        self.tokens.get(id as usize).ok_or(EnvError::UnknownToken(id))
    }

    pub fn token_for(&self, char_idx: usize, bin: usize) -> TokenId {
        (char_idx * self.pitch_bins.len() + bin) as TokenId
    }

    pub fn char_index(&self, ch: char) -> Option<usize> {
        self.chars.iter().position(|&c| c == ch)
    }

    /// `(char index, pitch bin)` of a voiced token, `None` for EOS.
    pub fn decompose(&self, id: TokenId) -> Result<Option<(usize, usize)>> {
        self.token(id)?;
        if self.is_eos(id) {
            return Ok(None);
        }
        let n = self.pitch_bins.len();
        Ok(Some((id as usize / n, id as usize % n)))
    }

    pub fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        if let Some(bad) = prompt.target_text.chars().find(|c| self.char_index(*c).is_none()) {
            return Err(EnvError::BadPrompt {
                id: prompt.id.clone(),
                reason: format!("character {bad:?} not in alphabet"),
            });
        }
        if prompt.reference_embedding.len() != self.n_bins() {
            return Err(EnvError::EmbeddingDim {
                got: prompt.reference_embedding.len(),
                expected: self.n_bins(),
            });
        }
        Ok(())
    }
}

/// Text to be read plus the target speaker's pitch-usage profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub target_text: String,
    /// Unit-norm pitch-bin profile of the target speaker style.
    pub reference_embedding: Vec<f64>,
}

impl Prompt {
    pub fn new(id: impl Into<String>, target_text: impl Into<String>, reference_embedding: Vec<f64>) -> Result<Self> {
        let id = id.into();
        let target_text = target_text.into();
        if target_text.is_empty() {
            return Err(EnvError::BadPrompt {
                id,
                reason: "empty target text".into(),
            });
        }
        let norm = l2_norm(&reference_embedding);
        if reference_embedding.iter().any(|v| !v.is_finite()) || (norm - 1.0).abs() > 1e-9 {
            return Err(EnvError::BadPrompt {
                id,
                reason: format!("reference embedding norm {norm} is not 1"),
            });
        }
        Ok(Self {
            id,
            target_text,
            reference_embedding,
        })
    }

    /// Builds a prompt whose embedding is `profile` scaled to unit norm.
    pub fn from_profile(id: impl Into<String>, target_text: impl Into<String>, profile: &[f64]) -> Result<Self> {
        let norm = l2_norm(profile);
        let id = id.into();
        if !(norm > 0.0) {
            return Err(EnvError::BadPrompt {
                id,
                reason: "zero speaker profile".into(),
            });
        }
        Self::new(id, target_text, profile.iter().map(|v| v / norm).collect())
    }
}

/// Prompts indexed by id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    prompts: Vec<Prompt>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl PromptSet {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, p) in prompts.iter().enumerate() {
            if index.insert(p.id.clone(), i).is_some() {
                return Err(EnvError::BadPrompt {
                    id: p.id.clone(),
                    reason: "duplicate prompt id".into(),
                });
            }
        }
        Ok(Self { prompts, index })
    }

    pub fn get(&self, id: &str) -> Option<&Prompt> {
        self.index.get(id).map(|&i| &self.prompts[i])
    }

    pub fn as_slice(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Prompt> {
        self.prompts.iter()
    }
}

/// One sampled utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub prompt_id: String,
    pub token_ids: Vec<TokenId>,
    /// EOS was emitted before the length limit.
    pub terminated: bool,
    /// Per-token log-probabilities under the generating policy, nats.
    #[serde(rename = "logprobs")]
    pub token_logprobs: Vec<f64>,
    pub seed: u64,
}

impl Candidate {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.token_logprobs.len() != self.token_ids.len() {
            return Err(EnvError::BadCandidate(format!(
                "{} logprobs for {} tokens",
                self.token_logprobs.len(),
                self.token_ids.len()
            )));
        }
        if let Some(lp) = self.token_logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(EnvError::BadCandidate(format!("logprob {lp} is not <= 0")));
        }
        for (i, &t) in self.token_ids.iter().enumerate() {
            vocab.token(t)?;
            if vocab.is_eos(t) && i + 1 != self.token_ids.len() {
                return Err(EnvError::BadCandidate("token after EOS".into()));
            }
        }
        let ends_with_eos = self.token_ids.last().is_some_and(|&t| vocab.is_eos(t));
        if self.terminated != ends_with_eos {
            return Err(EnvError::BadCandidate(format!(
                "terminated={} but final token {} EOS",
                self.terminated,
                if ends_with_eos { "is" } else { "is not" }
            )));
        }
        Ok(())
    }

    /// Voiced (non-EOS) token count.
    pub fn voiced_len(&self) -> usize {
        self.token_ids.len() - usize::from(self.terminated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProsodyStats {
    pub mean_logf0: f64,
    pub std_logf0: f64,
    pub n_voiced: usize,
}

pub fn transcript(candidate: &Candidate, vocab: &Vocab) -> Result<String> {
    let mut out = String::with_capacity(candidate.token_ids.len());
    for &t in &candidate.token_ids {
        if let Some(ch) = vocab.token(t)?.ch {
            out.push(ch);
        }
    }
    Ok(out)
}

/// Natural log of the pitch of every voiced token, in order.
pub fn pitch_contour(candidate: &Candidate, vocab: &Vocab) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(candidate.token_ids.len());
    for &t in &candidate.token_ids {
        if let Some(hz) = vocab.token(t)?.pitch_hz {
            out.push(hz.ln());
        }
    }
    Ok(out)
}

/// Pooled mean and population standard deviation over all frames.
pub fn prosody_stats<C: AsRef<[f64]>>(contours: &[C]) -> Result<ProsodyStats> {
    let n: usize = contours.iter().map(|c| c.as_ref().len()).sum();
    if n == 0 {
        return Err(EnvError::NoVoicedFrames);
    }
    let frames = || contours.iter().flat_map(|c| c.as_ref().iter().copied());
    let mean = frames().sum::<f64>() / n as f64;
    let var = frames().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    Ok(ProsodyStats {
        mean_logf0: mean,
        std_logf0: var.sqrt(),
        n_voiced: n,
    })
}

/// Occupancy count of each pitch bin over the voiced tokens.
pub fn pitch_histogram(candidate: &Candidate, vocab: &Vocab) -> Result<Vec<f64>> {
    let mut hist = vec![0.0; vocab.n_bins()];
    for &t in &candidate.token_ids {
        if let Some((_, bin)) = vocab.decompose(t)? {
            hist[bin] += 1.0;
        }
    }
    Ok(hist)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (l2_norm(a) * l2_norm(b))).clamp(-1.0, 1.0)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine between the candidate's pitch-bin histogram and the prompt's
/// reference embedding.
pub fn speaker_similarity(candidate: &Candidate, prompt: &Prompt, vocab: &Vocab) -> Result<f64> {
    if prompt.reference_embedding.len() != vocab.n_bins() {
        return Err(EnvError::EmbeddingDim {
            got: prompt.reference_embedding.len(),
            expected: vocab.n_bins(),
        });
    }
    let hist = pitch_histogram(candidate, vocab)?;
    if hist.iter().all(|&c| c == 0.0) {
        return Err(EnvError::EmptyCandidate);
    }
    Ok(cosine(&hist, &prompt.reference_embedding))
}

/// Scores a candidate: CER against the prompt text, mean per-token NLL under
/// the frozen `scorer`, and optionally speaker similarity.
pub fn score(candidate: &Candidate, prompt: &Prompt, vocab: &Vocab, scorer: &PolicyParams, with_similarity: bool) -> Result<Metrics> {
    candidate.validate(vocab)?;
    if candidate.token_ids.is_empty() {
        return Err(EnvError::BadCandidate("no tokens".into()));
    }
    let c = reward::cer(&prompt.target_text, &transcript(candidate, vocab)?)?;
    let lp = scorer
        .sequence_logprob(prompt, candidate)
        .map_err(|e| EnvError::Policy(Box::new(e)))?;
    let ell = (-lp / candidate.token_ids.len() as f64).max(0.0);
    let sim = if with_similarity {
        Some(speaker_similarity(candidate, prompt, vocab)?)
    } else {
        None
    };
    Ok(Metrics::new(c, ell, sim)?)
}

/// Line-delimited candidate records, one JSON object per line.
pub fn write_candidates<W: Write>(mut w: W, candidates: &[Candidate]) -> Result<()> {
    for c in candidates {
        serde_json::to_writer(&mut w, c).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_candidates<R: BufRead>(r: R) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EnvError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

/// Pooled pitch-bin occupancy as a `bin_log_hz,count` CSV.
pub fn pitch_histogram_csv(candidates: &[Candidate], vocab: &Vocab) -> Result<String> {
    let mut counts = vec![0u64; vocab.n_bins()];
    for c in candidates {
        for (bin, n) in pitch_histogram(c, vocab)?.into_iter().enumerate() {
            counts[bin] += n as u64;
        }
    }
    let mut out = String::from("bin_log_hz,count\n");
    for (hz, n) in vocab.pitch_bins().iter().zip(counts) {
        let _ = writeln!(out, "{:.6},{}", hz.ln(), n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn vocab_ab() -> Vocab {
        Vocab::new(vec!['a', 'b'], vec![100.0, 120.0, 180.0, 240.0]).unwrap()
    }

    fn cand(tokens: Vec<TokenId>, terminated: bool) -> Candidate {
        Candidate {
            prompt_id: "p".into(),
            token_logprobs: vec![-0.5; tokens.len()],
            token_ids: tokens,
            terminated,
            seed: 0,
        }
    }

    #[test]
    fn default_vocab_shape() {
        let v = Vocab::geometric("abcde", 10, 80.0, 300.0).unwrap();
        assert_eq!(v.size(), 51);
        assert_relative_eq!(v.pitch_bins()[0], 80.0);
        assert_relative_eq!(v.pitch_bins()[9], 300.0, epsilon = 1e-9);
        assert_eq!(v.tokens().iter().filter(|t| t.is_eos).count(), 1);
        assert!(Vocab::new(vec!['a'], vec![100.0, 100.0]).is_err());
    }

    #[test]
    fn transcript_readout() {
        let v = vocab_ab();
        let a120 = v.token_for(0, 1);
        let b180 = v.token_for(1, 2);
        let c = cand(vec![a120, b180, v.eos()], true);
        assert_eq!(transcript(&c, &v).unwrap(), "ab");
        assert_eq!(transcript(&cand(vec![v.eos()], true), &v).unwrap(), "");
        let a240 = v.token_for(0, 3);
        let open = cand(vec![a120, a240, a120], false);
        open.validate(&v).unwrap();
        assert_eq!(transcript(&open, &v).unwrap(), "aaa");
        assert!(matches!(transcript(&cand(vec![99], false), &v), Err(EnvError::UnknownToken(99))));
    }

    #[test]
    fn contour_and_stats() {
        let v = vocab_ab();
        let a100 = v.token_for(0, 0);
        let c = pitch_contour(&cand(vec![a100], false), &v).unwrap();
        assert_relative_eq!(c[0], 4.605_170_185_988_091, epsilon = 1e-14);
        assert!(pitch_contour(&cand(vec![v.eos()], true), &v).unwrap().is_empty());
        let flat = pitch_contour(&cand(vec![a100, v.token_for(1, 0)], false), &v).unwrap();
        assert_eq!(prosody_stats(&[flat]).unwrap().std_logf0, 0.0);

        let s = prosody_stats(&[vec![4.0, 4.0]]).unwrap();
        assert_eq!((s.mean_logf0, s.std_logf0, s.n_voiced), (4.0, 0.0, 2));
        let s = prosody_stats(&[vec![4.0, 6.0]]).unwrap();
        assert_eq!((s.mean_logf0, s.std_logf0), (5.0, 1.0));
        let s = prosody_stats(&[vec![4.0], vec![6.0], vec![5.0]]).unwrap();
        assert_eq!(s.mean_logf0, 5.0);
        assert_relative_eq!(s.std_logf0, 0.816_496_580_927_726, epsilon = 1e-14);
        assert!(matches!(prosody_stats::<Vec<f64>>(&[vec![]]), Err(EnvError::NoVoicedFrames)));
    }

    #[test]
    fn similarity_examples() {
        let v = Vocab::new(vec!['a'], vec![100.0, 150.0, 200.0]).unwrap();
        let t = |b| v.token_for(0, b);
        let p = Prompt::from_profile("p", "aaaa", &[2.0, 1.0, 1.0]).unwrap();
        let same = cand(vec![t(0), t(0), t(1), t(2)], false);
        assert_relative_eq!(speaker_similarity(&same, &p, &v).unwrap(), 1.0, epsilon = 1e-12);

        let p1 = Prompt::new("p", "a", vec![1.0, 0.0, 0.0]).unwrap();
        let disjoint = cand(vec![t(1), t(2)], false);
        assert_eq!(speaker_similarity(&disjoint, &p1, &v).unwrap(), 0.0);
        assert_relative_eq!(speaker_similarity(&same, &p1, &v).unwrap(), 0.816_496_580_927_726, epsilon = 1e-12);

        let empty = cand(vec![v.eos()], true);
        assert!(matches!(speaker_similarity(&empty, &p1, &v), Err(EnvError::EmptyCandidate)));
    }

    #[test]
    fn candidate_invariants() {
        let v = vocab_ab();
        assert!(cand(vec![v.eos(), 0], false).validate(&v).is_err());
        assert!(cand(vec![0, v.eos()], false).validate(&v).is_err());
        assert!(cand(vec![0, 1], true).validate(&v).is_err());
        let mut c = cand(vec![0, 1], false);
        c.token_logprobs[0] = 0.1;
        assert!(c.validate(&v).is_err());
        c.token_logprobs.pop();
        assert!(c.validate(&v).is_err());
    }

    #[test]
    fn prompt_validation() {
        assert!(Prompt::new("x", "", vec![1.0]).is_err());
        assert!(Prompt::new("x", "a", vec![0.5, 0.5]).is_err());
        let v = vocab_ab();
        let p = Prompt::from_profile("x", "abz", &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(v.check_prompt(&p).is_err());
        assert!(PromptSet::new(vec![p.clone(), p]).is_err());
    }

    #[test]
    fn candidate_records_and_histogram_csv() {
        let v = vocab_ab();
        let cs = vec![cand(vec![0, 5, v.eos()], true), cand(vec![1, 1], false)];
        let mut buf = Vec::new();
        write_candidates(&mut buf, &cs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"prompt_id\":\"p\",\"token_ids\":[0,5,8],\"terminated\":true,\"logprobs\""));
        assert_eq!(read_candidates(&buf[..]).unwrap(), cs);

        let csv = pitch_histogram_csv(&cs, &v).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bin_log_hz,count");
        assert_eq!(lines[1], "4.605170,1");
        assert_eq!(lines[2], "4.787492,3");
    }
}
