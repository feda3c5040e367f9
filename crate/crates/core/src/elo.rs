//! ELO aggregation of blind pairwise votes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EloError {
    #[error("unknown system {0:?}")]
    UnknownSystem(String),
    #[error("vote {0} pits a system against itself")]
    SelfMatch(String),
    #[error("vote {vote_id} at index {index} has timestamp {timestamp}, earlier than the previous {previous}")]
    OutOfOrder {
        index: usize,
        vote_id: String,
        timestamp: u64,
        previous: u64,
    },
    #[error("invalid rating config: {0}")]
    Config(String),
    #[error("vote log line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EloError>;

pub const VOTE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Winner {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub schema_version: u32,
    pub vote_id: String,
    pub system_a: String,
    pub system_b: String,
    pub winner: Winner,
    pub annotator_id: String,
    pub timestamp: u64,
    pub prompt_id: String,
}

impl VoteRecord {
    pub fn winner_loser(&self) -> (&str, &str) {
        match self.winner {
            Winner::A => (&self.system_a, &self.system_b),
            Winner::B => (&self.system_b, &self.system_a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EloConfig {
    pub k_factor: f64,
    pub initial_rating: f64,
}

impl Default for EloConfig {
    fn default() -> Self {
        Self {
            k_factor: 32.0,
            initial_rating: 1000.0,
        }
    }
}

impl EloConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_factor > 0.0 && self.k_factor.is_finite()) || !self.initial_rating.is_finite() {
            return Err(EloError::Config("k_factor must be positive and initial_rating finite".into()));
        }
        Ok(())
    }
}

/// Probability that a player rated `r_a` beats one rated `r_b`.
pub fn expected_score(r_a: f64, r_b: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((r_b - r_a) / 400.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTable {
    ratings: BTreeMap<String, f64>,
    n_votes: BTreeMap<String, u64>,
    k_factor: f64,
    initial_rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderRow {
    pub system: String,
    pub rating: f64,
    pub n_votes: u64,
}

pub const LEADERBOARD_HEADER: &str = "system,rating,n_votes";

impl RatingTable {
    pub fn new<S: AsRef<str>>(systems: &[S], cfg: &EloConfig) -> Result<Self> {
        cfg.validate()?;
        let mut t = Self {
            ratings: BTreeMap::new(),
            n_votes: BTreeMap::new(),
            k_factor: cfg.k_factor,
            initial_rating: cfg.initial_rating,
        };
        for s in systems {
            t.register(s.as_ref());
        }
        Ok(t)
    }

    /// Adds a system at the initial rating; no-op if already present.
    pub fn register(&mut self, system: &str) {
        self.ratings.entry(system.to_owned()).or_insert(self.initial_rating);
        self.n_votes.entry(system.to_owned()).or_insert(0);
    }

    pub fn rating(&self, system: &str) -> Option<f64> {
        self.ratings.get(system).copied()
    }

    pub fn votes(&self, system: &str) -> Option<u64> {
        self.n_votes.get(system).copied()
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn k_factor(&self) -> f64 {
        self.k_factor
    }

    pub fn initial_rating(&self) -> f64 {
        self.initial_rating
    }

    pub fn total_rating(&self) -> f64 {
        self.ratings.values().sum()
    }

    /// Applies one vote; returns the points moved from loser to winner.
    pub fn apply_vote(&mut self, vote: &VoteRecord) -> Result<f64> {
        if vote.system_a == vote.system_b {
            return Err(EloError::SelfMatch(vote.vote_id.clone()));
        }
        let (w, l) = vote.winner_loser();
        let rw = self.rating(w).ok_or_else(|| EloError::UnknownSystem(w.to_owned()))?;
        let rl = self.rating(l).ok_or_else(|| EloError::UnknownSystem(l.to_owned()))?;
        let delta = self.k_factor * (1.0 - expected_score(rw, rl));
        self.ratings.insert(w.to_owned(), rw + delta);
        self.ratings.insert(l.to_owned(), rl - delta);
        *self.n_votes.get_mut(w).expect("registered") += 1;
        *self.n_votes.get_mut(l).expect("registered") += 1;
        Ok(delta)
    }

    /// Rows sorted by rating, highest first; equal ratings by name.
    pub fn leaderboard(&self) -> Vec<LeaderRow> {
        let mut rows: Vec<LeaderRow> = self
            .ratings
            .iter()
            .map(|(s, &r)| LeaderRow {
                system: s.clone(),
                rating: r,
                n_votes: self.n_votes[s],
            })
            .collect();
        sort_rows(&mut rows);
        rows
    }
}

pub fn sort_rows(rows: &mut [LeaderRow]) {
    rows.sort_by(|a, b| b.rating.total_cmp(&a.rating).then_with(|| a.system.cmp(&b.system)));
}

pub fn leaderboard_csv(rows: &[LeaderRow]) -> String {
    let mut out = String::from(LEADERBOARD_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{:.4},{}", r.system, r.rating, r.n_votes);
    }
    out
}

/// Folds `votes` in order, starting every system in `systems` at the initial
/// rating. Timestamps must be non-decreasing.
pub fn aggregate<S: AsRef<str>>(votes: &[VoteRecord], systems: &[S], cfg: &EloConfig) -> Result<RatingTable> {
    let mut table = RatingTable::new(systems, cfg)?;
    let mut previous = 0u64;
    for (index, v) in votes.iter().enumerate() {
        if v.timestamp < previous {
            return Err(EloError::OutOfOrder {
                index,
                vote_id: v.vote_id.clone(),
                timestamp: v.timestamp,
                previous,
            });
        }
        previous = v.timestamp;
        table.apply_vote(v)?;
    }
    Ok(table)
}

/// Every system named in `votes`, sorted.
pub fn systems_in(votes: &[VoteRecord]) -> Vec<String> {
    let mut s: Vec<String> = votes.iter().flat_map(|v| [v.system_a.clone(), v.system_b.clone()]).collect();
    s.sort();
    s.dedup();
    s
}

pub fn write_votes<W: Write>(mut w: W, votes: &[VoteRecord]) -> Result<()> {
    for v in votes {
        serde_json::to_writer(&mut w, v).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_votes<R: BufRead>(r: R) -> Result<Vec<VoteRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EloError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

/// Log-5 head-to-head probability for two players with absolute strengths
/// `p_a`, `p_b` in (0, 1).
pub fn log5(p_a: f64, p_b: f64) -> f64 {
    let a = p_a * (1.0 - p_b);
    a / (a + p_b * (1.0 - p_a))
}

/// Random-pairing tournament among `(system, strength)` players; outcomes
/// follow [`log5`].
pub fn simulate_tournament(players: &[(String, f64)], n_votes: usize, seed: u64) -> Vec<VoteRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_votes)
        .map(|i| {
            let a = rng.random_range(0..players.len());
            let mut b = rng.random_range(0..players.len() - 1);
            if b >= a {
                b += 1;
            }
            let p = log5(players[a].1, players[b].1);
            VoteRecord {
                schema_version: VOTE_SCHEMA_VERSION,
                vote_id: format!("sim-{i:06}"),
                system_a: players[a].0.clone(),
                system_b: players[b].0.clone(),
                winner: if rng.random::<f64>() < p { Winner::A } else { Winner::B },
                annotator_id: "simulated".into(),
                timestamp: i as u64,
                prompt_id: String::new(),
            }
        })
        .collect()
}

/// A published result row: system, CER in percent, and ELO where rated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub system: &'static str,
    pub cer_percent: f64,
    pub elo: Option<f64>,
    pub internal: bool,
}

/// Published CER/ELO results used as report fixtures.
pub const PUBLISHED_ROWS: &[PublishedRow] = &[
    PublishedRow {
        system: "ElevenLabs (Multilingual v2)",
        cer_percent: 4.74,
        elo: Some(955.1),
        internal: false,
    },
    PublishedRow {
        system: "Supertone",
        cer_percent: 2.98,
        elo: Some(1046.9),
        internal: false,
    },
    PublishedRow {
        system: "GPT-4o-mini-tts (sage)",
        cer_percent: 2.91,
        elo: Some(848.9),
        internal: false,
    },
    PublishedRow {
        system: "Llasa-8B",
        cer_percent: 3.24,
        elo: None,
        internal: false,
    },
    PublishedRow {
        system: "Llasa-3B",
        cer_percent: 3.47,
        elo: None,
        internal: false,
    },
    PublishedRow {
        system: "Llasa-1B",
        cer_percent: 10.45,
        elo: None,
        internal: false,
    },
    PublishedRow {
        system: "channel-base",
        cer_percent: 2.90,
        elo: Some(1150.1),
        internal: true,
    },
    PublishedRow {
        system: "GRPO (clean)",
        cer_percent: 2.20,
        elo: Some(753.7),
        internal: true,
    },
    PublishedRow {
        system: "GRPO-sim extension",
        cer_percent: 42.63,
        elo: Some(878.7),
        internal: true,
    },
    PublishedRow {
        system: "channel-base-dpo-v1",
        cer_percent: 5.80,
        elo: Some(1096.5),
        internal: true,
    },
    PublishedRow {
        system: "channel-base-dpo-v2",
        cer_percent: 3.60,
        elo: Some(1190.1),
        internal: true,
    },
    PublishedRow {
        system: "channel-base-dpo-v3",
        cer_percent: 3.30,
        elo: Some(1064.2),
        internal: true,
    },
];

/// Rated published rows as a sorted leaderboard.
pub fn published_leaderboard() -> Vec<LeaderRow> {
    let mut rows: Vec<LeaderRow> = PUBLISHED_ROWS
        .iter()
        .filter_map(|r| {
            r.elo.map(|e| LeaderRow {
                system: r.system.to_owned(),
                rating: e,
                n_votes: 0,
            })
        })
        .collect();
    sort_rows(&mut rows);
    rows
}
