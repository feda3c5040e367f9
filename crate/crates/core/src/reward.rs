//! Utility mappings and weighted harmonic-mean reward composition.
//!
//! Each metric is mapped into `(0, 1]`:
//!
//! ```text
//! U_c = 1 - tanh(tau_c * c)          character error rate
//! U_l = exp(-l / tau_l)              per-token negative log-likelihood
//! U_s = max(floor, clamp((s+1)/2))   speaker similarity
//! ```
//!
//! and the reward is the weighted harmonic mean `sum(w) / sum(w_i / U_i)`
//! over two (CER, NLL) or three (CER, NLL, similarity) utilities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default lower bound applied to the similarity utility.
pub const DEFAULT_SIM_FLOOR: f64 = 1e-6;

const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("reference transcript is empty")]
    EmptyReference,
    #[error("{name} must be non-negative and finite, got {value}")]
    NegativeMetric { name: &'static str, value: f64 },
    #[error("similarity {0} outside [-1, 1]")]
    SimilarityOutOfRange(f64),
    #[error("temperature {name} must be positive and finite, got {value}")]
    BadTemperature { name: &'static str, value: f64 },
    #[error("similarity floor must lie in (0, 1), got {0}")]
    BadFloor(f64),
    #[error("weight {name} must be positive and finite, got {value}")]
    BadWeight { name: &'static str, value: f64 },
    #[error("weights must sum to 1, got {0}")]
    WeightsNotNormalized(f64),
    #[error("utility {0} outside (0, 1]")]
    UtilityOutOfRange(f64),
    #[error("three-term weights need a similarity metric")]
    MissingSimilarity,
}

pub type Result<T> = std::result::Result<T, RewardError>;

/// The scored triple feeding every reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Character error rate. May exceed 1 because of insertions.
    pub cer: f64,
    /// Average negative log-likelihood per generated token, nats.
    pub nll: f64,
    /// Cosine speaker similarity in `[-1, 1]`.
    pub sim: Option<f64>,
}

impl Metrics {
    pub fn new(cer: f64, nll: f64, sim: Option<f64>) -> Result<Self> {
        check_nonneg("cer", cer)?;
        check_nonneg("nll", nll)?;
        if let Some(s) = sim {
            check_similarity(s)?;
        }
        Ok(Self { cer, nll, sim })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub tau_c: f64,
    pub tau_ell: f64,
}

impl Temperatures {
    pub fn new(tau_c: f64, tau_ell: f64) -> Result<Self> {
        check_temperature("tau_c", tau_c)?;
        check_temperature("tau_ell", tau_ell)?;
        Ok(Self { tau_c, tau_ell })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.tau_c, self.tau_ell).map(|_| ())
    }
}

impl Default for Temperatures {
    fn default() -> Self {
        Self { tau_c: 1.0, tau_ell: 2.0 }
    }
}

/// Reward weights. A missing `lambda_s` selects the two-term reward.
///
/// Weights are validated, never renormalized: a configuration whose
/// weights do not sum to one is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_c: f64,
    pub lambda_ell: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_s: Option<f64>,
}

impl RewardWeights {
    pub fn two_term(lambda_c: f64, lambda_ell: f64) -> Result<Self> {
        let w = Self {
            lambda_c,
            lambda_ell,
            lambda_s: None,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn three_term(lambda_c: f64, lambda_ell: f64, lambda_s: f64) -> Result<Self> {
        let w = Self {
            lambda_c,
            lambda_ell,
            lambda_s: Some(lambda_s),
        };
        w.validate()?;
        Ok(w)
    }

    /// `(0.6, 0.4)`: the transcription-only setting.
    pub fn clean() -> Self {
        Self {
            lambda_c: 0.6,
            lambda_ell: 0.4,
            lambda_s: None,
        }
    }

    /// `(0.5, 0.3, 0.2)`: the speaker-similarity extension.
    pub fn sim() -> Self {
        Self {
            lambda_c: 0.5,
            lambda_ell: 0.3,
            lambda_s: Some(0.2),
        }
    }

    pub fn uses_similarity(&self) -> bool {
        self.lambda_s.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        check_weight("lambda_c", self.lambda_c)?;
        check_weight("lambda_ell", self.lambda_ell)?;
        if let Some(ls) = self.lambda_s {
            check_weight("lambda_s", ls)?;
        }
        let sum = self.lambda_c + self.lambda_ell + self.lambda_s.unwrap_or(0.0);
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(RewardError::WeightsNotNormalized(sum));
        }
        Ok(())
    }
}

/// A value in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Utility(f64);

impl Utility {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value <= 1.0 {
            Ok(Self(value))
        } else {
            Err(RewardError::UtilityOutOfRange(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn check_nonneg(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(RewardError::NegativeMetric { name, value })
    }
}

fn check_similarity(s: f64) -> Result<()> {
    if (-1.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(RewardError::SimilarityOutOfRange(s))
    }
}

fn check_temperature(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(RewardError::BadTemperature { name, value })
    }
}

fn check_weight(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(RewardError::BadWeight { name, value })
    }
}

pub fn check_floor(floor: f64) -> Result<()> {
    if floor > 0.0 && floor < 1.0 {
        Ok(())
    } else {
        Err(RewardError::BadFloor(floor))
    }
}

/// Unit-cost Levenshtein distance over Unicode scalar values.
///
/// Two-row dynamic program, `O(|a|·|b|)` time and `O(min)` memory.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (long, short) = if a.len() >= b.len() { (&a, &b) } else { (&b, &a) };
    if short.is_empty() {
        return long.len();
    }
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0usize; short.len() + 1];
    for (i, lc) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, sc) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(lc != sc);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// Character error rate: edit distance over reference length.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(RewardError::EmptyReference);
    }
    Ok(levenshtein(reference, hypothesis) as f64 / n as f64)
}

pub fn utility_cer(c: f64, tau_c: f64) -> Result<Utility> {
    check_nonneg("cer", c)?;
    check_temperature("tau_c", tau_c)?;
    // 1 - tanh(x) = 2 / (e^{2x} + 1); stays positive long after tanh rounds to 1.
    let u = 2.0 / ((2.0 * tau_c * c).exp() + 1.0);
    Utility::new(if u > 0.0 { u } else { f64::MIN_POSITIVE })
}

pub fn utility_nll(ell: f64, tau_ell: f64) -> Result<Utility> {
    check_nonneg("nll", ell)?;
    check_temperature("tau_ell", tau_ell)?;
    let u = (-ell / tau_ell).exp();
    Utility::new(if u > 0.0 { u } else { f64::MIN_POSITIVE })
}

pub fn utility_sim(s: f64, floor: f64) -> Result<Utility> {
    check_similarity(s)?;
    check_floor(floor)?;
    let clamped = ((s + 1.0) / 2.0).clamp(0.0, 1.0);
    Utility::new(clamped.max(floor))
}

/// Weighted harmonic mean of `(weight, utility)` terms.
pub fn harmonic_mean(terms: &[(f64, Utility)]) -> f64 {
    let num: f64 = terms.iter().map(|(w, _)| w).sum();
    let den: f64 = terms.iter().map(|(w, u)| w / u.value()).sum();
    let r = num / den;
    // Rounding can push an all-ones mean a hair above 1.
    r.min(1.0)
}

/// Composite reward over the two or three utilities selected by `weights`.
pub fn reward(metrics: &Metrics, weights: &RewardWeights, temps: &Temperatures, floor: f64) -> Result<f64> {
    weights.validate()?;
    temps.validate()?;
    let uc = utility_cer(metrics.cer, temps.tau_c)?;
    let ul = utility_nll(metrics.nll, temps.tau_ell)?;
    match weights.lambda_s {
        None => Ok(harmonic_mean(&[(weights.lambda_c, uc), (weights.lambda_ell, ul)])),
        Some(ls) => {
            let s = metrics.sim.ok_or(RewardError::MissingSimilarity)?;
            let us = utility_sim(s, floor)?;
            Ok(harmonic_mean(&[(weights.lambda_c, uc), (weights.lambda_ell, ul), (ls, us)]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Full-matrix edit distance, kept naive on purpose.
    #[allow(clippy::needless_range_loop)]
    fn naive_edit_distance(a: &[char], b: &[char]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert_eq!(cer("ab", "abcd").unwrap(), 1.0);
        assert_eq!(cer("kitten", "sitting").unwrap(), 0.5);
        assert_eq!(cer("", "x"), Err(RewardError::EmptyReference));
        assert!(cer("a", "abcd").unwrap() > 1.0);
    }

    #[test]
    fn utility_examples() {
        assert_eq!(utility_cer(0.0, 3.7).unwrap().value(), 1.0);
        assert_relative_eq!(utility_cer(0.1, 1.0).unwrap().value(), 0.900_332_005_375_044_2, epsilon = 1e-15);
        let tail = utility_cer(10.0, 1.0).unwrap().value();
        assert!(tail > 0.0);
        assert_relative_eq!(tail, 4.122_307_236_380_407e-9, max_relative = 1e-6);

        assert_eq!(utility_nll(0.0, 0.3).unwrap().value(), 1.0);
        assert_relative_eq!(utility_nll(2.0, 2.0).unwrap().value(), 0.367_879_441_171_442_3, epsilon = 1e-15);
        assert_relative_eq!(utility_nll(1.0, 0.5).unwrap().value(), 0.135_335_283_236_612_7, epsilon = 1e-15);

        assert_eq!(utility_sim(1.0, 1e-6).unwrap().value(), 1.0);
        assert_eq!(utility_sim(0.0, 1e-6).unwrap().value(), 0.5);
        assert_eq!(utility_sim(-1.0, 1e-6).unwrap().value(), 1e-6);
    }

    #[test]
    fn utility_errors() {
        assert!(utility_cer(-0.1, 1.0).is_err());
        assert!(utility_nll(-1e-9, 1.0).is_err());
        assert!(utility_sim(1.0001, 1e-6).is_err());
        assert!(utility_sim(0.0, 0.0).is_err());
        assert!(utility_cer(0.1, 0.0).is_err());
    }

    #[test]
    fn reward_examples() {
        let t = Temperatures::default();
        let m = Metrics::new(0.0, 0.0, None).unwrap();
        assert_eq!(reward(&m, &RewardWeights::clean(), &t, DEFAULT_SIM_FLOOR).unwrap(), 1.0);

        let half = Utility::new(0.5).unwrap();
        assert_eq!(harmonic_mean(&[(0.6, half), (0.4, half)]), 0.5);

        let m = Metrics::new(0.1, 2.0, Some(0.0)).unwrap();
        let t = Temperatures::new(1.0, 2.0).unwrap();
        let r = reward(&m, &RewardWeights::sim(), &t, 1e-6).unwrap();
        assert_relative_eq!(r, 0.564_705_274_944_438_8, epsilon = 1e-12);
    }

    #[test]
    fn arity_and_weight_validation() {
        let m = Metrics::new(0.1, 1.0, None).unwrap();
        let err = reward(&m, &RewardWeights::sim(), &Temperatures::default(), 1e-6).unwrap_err();
        assert_eq!(err, RewardError::MissingSimilarity);
        assert!(matches!(
            RewardWeights::two_term(0.6, 0.5),
            Err(RewardError::WeightsNotNormalized(_))
        ));
        assert!(RewardWeights::three_term(0.5, 0.5, 0.0).is_err());
        // A similarity value on a two-term config is ignored.
        let m = Metrics::new(0.1, 1.0, Some(0.3)).unwrap();
        assert!(reward(&m, &RewardWeights::clean(), &Temperatures::default(), 1e-6).is_ok());
    }

    #[test]
    fn metrics_validation() {
        assert!(Metrics::new(-0.1, 0.0, None).is_err());
        assert!(Metrics::new(0.0, f64::NAN, None).is_err());
        assert!(Metrics::new(0.0, 0.0, Some(-1.5)).is_err());
    }

    proptest! {
        #[test]
        fn levenshtein_matches_naive(a in "[a-e]{1,40}", b in "[a-e]{0,40}") {
            let ac: Vec<char> = a.chars().collect();
            let bc: Vec<char> = b.chars().collect();
            prop_assert_eq!(levenshtein(&a, &b), naive_edit_distance(&ac, &bc));
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        }

        #[test]
        fn reward_between_component_extremes(
            c in 0.0f64..5.0, l in 0.0f64..10.0, s in -1.0f64..=1.0,
            wc in 0.05f64..1.0, wl in 0.05f64..1.0, ws in 0.05f64..1.0,
        ) {
            let sum = wc + wl + ws;
            let w = RewardWeights { lambda_c: wc / sum, lambda_ell: wl / sum, lambda_s: Some(1.0 - wc / sum - wl / sum) };
            let t = Temperatures::default();
            let m = Metrics::new(c, l, Some(s)).unwrap();
            if w.validate().is_ok() {
                let r = reward(&m, &w, &t, DEFAULT_SIM_FLOOR).unwrap();
                let us = [
                    utility_cer(c, t.tau_c).unwrap().value(),
                    utility_nll(l, t.tau_ell).unwrap().value(),
                    utility_sim(s, DEFAULT_SIM_FLOOR).unwrap().value(),
                ];
                let lo = us.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = us.iter().cloned().fold(0.0, f64::max);
                prop_assert!(r > 0.0 && r <= 1.0);
                prop_assert!(r >= lo * (1.0 - 1e-12) && r <= hi * (1.0 + 1e-12));
            }
        }
    }
}
