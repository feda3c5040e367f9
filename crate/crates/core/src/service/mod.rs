//! Blind pairwise labeling queue.
//!
//! On disk, under the service root:
//!
//! ```text
//! rounds/{r}/tasks.jsonl     one task per line, written when the round is queued
//! rounds/{r}/journal.jsonl   append-only; one line per accepted vote
//! rounds/{r}/pairs.jsonl     export: preference pairs in vote order
//! rounds/{r}/votes.jsonl     export: ELO vote records in vote order
//! ```
//!
//! A journal line carries both the preference pair and the vote record, so
//! one `write` makes a vote durable. On startup the journal is replayed; a
//! final line without its newline is a write cut short by a crash and is
//! dropped.

pub mod http;

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::PairSource;
use crate::derive_seed;
use crate::dpo::{PreferencePair, PAIRS_SCHEMA_VERSION};
use crate::elo::{self, EloConfig, LeaderRow, VoteRecord, Winner, VOTE_SCHEMA_VERSION};
use crate::env::{self, Candidate, EnvError, Prompt, Vocab};

pub const API_SCHEMA_VERSION: u32 = 1;

/// In-flight tasks return to the queue after this long without a vote.
pub const TASK_TTL_MS: u64 = 10 * 60 * 1000;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown round {0}")]
    UnknownRound(u32),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task {task_id}: {reason}")]
    Conflict { task_id: String, reason: String },
    #[error("round {round} is incomplete: {missing} votes missing")]
    Incomplete { round: u32, missing: usize },
    #[error("round {0} is already queued")]
    RoundExists(u32),
    #[error("invalid task: {0}")]
    BadTask(String),
    #[error("corrupt {path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Elo(#[from] elo::EloError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

/// Millisecond wall clock, replaceable in tests.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    }
}

/// A queued comparison with its hidden side assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub schema_version: u32,
    pub task_id: String,
    pub round: u32,
    pub prompt_id: String,
    pub target_text: String,
    pub first: Candidate,
    pub second: Candidate,
    /// System names for the leaderboard; equal names (pairs drawn from one
    /// policy) produce no vote record.
    pub first_system: String,
    pub second_system: String,
    /// Whether `first` is displayed as side A.
    pub first_is_a: bool,
}

impl TaskRecord {
    fn sides(&self) -> ((&Candidate, &str), (&Candidate, &str)) {
        let f = (&self.first, self.first_system.as_str());
        let s = (&self.second, self.second_system.as_str());
        if self.first_is_a {
            (f, s)
        } else {
            (s, f)
        }
    }
}

/// A pair of candidates to queue, before side assignment.
#[derive(Debug, Clone)]
pub struct NewTask {
    pub prompt: Prompt,
    pub first: Candidate,
    pub second: Candidate,
    pub first_system: String,
    pub second_system: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

/// One durable vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub schema_version: u32,
    pub task_id: String,
    pub annotator_id: String,
    pub choice: Choice,
    pub timestamp: u64,
    pub pair: PreferencePair,
    pub vote: Option<VoteRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideView {
    pub transcript: String,
    pub contour: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub voted: usize,
    pub total: usize,
}

/// Client-facing task: never includes candidate ids, systems or sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub round: u32,
    pub text: String,
    pub side_a: SideView,
    pub side_b: SideView,
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextPair {
    Task {
        schema_version: u32,
        task: TaskView,
        progress: Progress,
    },
    /// Nothing pending for this annotator, but votes are outstanding.
    Waiting {
        schema_version: u32,
        in_flight: usize,
        progress: Progress,
    },
    RoundComplete {
        schema_version: u32,
        progress: Progress,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRequest {
    pub task_id: String,
    pub annotator_id: String,
    pub choice: Choice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteAck {
    pub schema_version: u32,
    pub task_id: String,
    pub recorded: bool,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub schema_version: u32,
    pub round: u32,
    pub count: usize,
    pub complete: bool,
    pub pairs_path: PathBuf,
    pub votes_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub schema_version: u32,
    pub rows: Vec<LeaderRow>,
}

#[derive(Debug, Clone, PartialEq)]
enum Status {
    Pending,
    InFlight { annotator: String, expires_at: u64 },
    Voted { annotator: String, choice: Choice },
}

#[derive(Debug)]
struct RoundQueue {
    tasks: Vec<TaskRecord>,
    status: Vec<Status>,
    index: BTreeMap<String, usize>,
    served: BTreeMap<String, HashSet<usize>>,
    journal: Vec<JournalEntry>,
    journal_file: File,
}

impl RoundQueue {
    fn progress(&self) -> Progress {
        Progress {
            voted: self.journal.len(),
            total: self.tasks.len(),
        }
    }

    fn expire(&mut self, now: u64) {
        for s in &mut self.status {
            if matches!(s, Status::InFlight { expires_at, .. } if *expires_at <= now) {
                *s = Status::Pending;
            }
        }
    }
}

pub fn round_dir(root: &Path, round: u32) -> PathBuf {
    root.join("rounds").join(round.to_string())
}

fn tasks_path(root: &Path, round: u32) -> PathBuf {
    round_dir(root, round).join("tasks.jsonl")
}

fn journal_path(root: &Path, round: u32) -> PathBuf {
    round_dir(root, round).join("journal.jsonl")
}

pub fn export_paths(root: &Path, round: u32) -> (PathBuf, PathBuf) {
    let d = round_dir(root, round);
    (d.join("pairs.jsonl"), d.join("votes.jsonl"))
}

/// Writes a round's task file with seeded side assignment.
pub fn enqueue_round(root: &Path, round: u32, tasks: &[NewTask], seed: u64) -> Result<Vec<TaskRecord>> {
    let path = tasks_path(root, round);
    if path.exists() {
        return Err(ServiceError::RoundExists(round));
    }
    let records: Vec<TaskRecord> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.first.prompt_id != t.prompt.id || t.second.prompt_id != t.prompt.id {
                return Err(ServiceError::BadTask(format!(
                    "task {i}: candidates do not match prompt {}",
                    t.prompt.id
                )));
            }
            if t.first.token_ids == t.second.token_ids {
                return Err(ServiceError::BadTask(format!("task {i}: identical candidates")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::from(round), i as u64]));
            Ok(TaskRecord {
                schema_version: API_SCHEMA_VERSION,
                task_id: format!("r{round}-t{i:05}"),
                round,
                prompt_id: t.prompt.id.clone(),
                target_text: t.prompt.target_text.clone(),
                first: t.first.clone(),
                second: t.second.clone(),
                first_system: t.first_system.clone(),
                second_system: t.second_system.clone(),
                first_is_a: rng.random::<bool>(),
            })
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(round_dir(root, round))?;
    let mut buf = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut buf, r).map_err(std::io::Error::from)?;
        buf.push(b'\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, buf)?;
    fs::rename(&tmp, &path)?;
    Ok(records)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, tolerate_torn_tail: bool) -> Result<(Vec<T>, u64)> {
    let bytes = fs::read(path)?;
    let good = if tolerate_torn_tail {
        bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1)
    } else {
        bytes.len()
    };
    let text = std::str::from_utf8(&bytes[..good]).map_err(|e| ServiceError::Corrupt {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| ServiceError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok((out, good as u64))
}

/// All queued rounds and their votes.
pub struct Store {
    root: PathBuf,
    vocab: Vocab,
    rounds: BTreeMap<u32, RoundQueue>,
    elo: EloConfig,
}

impl Store {
    /// Loads every round under `root` and replays its journal.
    pub fn open(root: impl Into<PathBuf>, vocab: Vocab, elo: EloConfig) -> Result<Self> {
        let root = root.into();
        let mut rounds = BTreeMap::new();
        let dir = root.join("rounds");
        if dir.exists() {
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                let Some(round) = entry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
                    continue;
                };
                if tasks_path(&root, round).exists() {
                    rounds.insert(round, Self::load_round(&root, round)?);
                }
            }
        }
        Ok(Self { root, vocab, rounds, elo })
    }

    fn load_round(root: &Path, round: u32) -> Result<RoundQueue> {
        let (tasks, _) = read_jsonl::<TaskRecord>(&tasks_path(root, round), false)?;
        let index: BTreeMap<String, usize> = tasks.iter().enumerate().map(|(i, t)| (t.task_id.clone(), i)).collect();
        let jpath = journal_path(root, round);
        let journal: Vec<JournalEntry> = if jpath.exists() {
            let (entries, good) = read_jsonl(&jpath, true)?;
            // Cut a torn tail so later appends start on a clean line.
            OpenOptions::new().write(true).open(&jpath)?.set_len(good)?;
            entries
        } else {
            Vec::new()
        };
        let mut status = vec![Status::Pending; tasks.len()];
        for e in &journal {
            let &i = index.get(&e.task_id).ok_or_else(|| ServiceError::Corrupt {
                path: jpath.clone(),
                line: 0,
                reason: format!("vote for unknown task {}", e.task_id),
            })?;
            status[i] = Status::Voted {
                annotator: e.annotator_id.clone(),
                choice: e.choice,
            };
        }
        let journal_file = OpenOptions::new().create(true).append(true).open(&jpath)?;
        Ok(RoundQueue {
            tasks,
            status,
            index,
            served: BTreeMap::new(),
            journal,
            journal_file,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn rounds(&self) -> Vec<u32> {
        self.rounds.keys().copied().collect()
    }

    /// Picks up a round queued on disk after the store was opened.
    pub fn reload_round(&mut self, round: u32) -> Result<()> {
        let q = Self::load_round(&self.root, round)?;
        self.rounds.insert(round, q);
        Ok(())
    }

    /// Loads `round` if it was queued on disk after the store was opened.
    pub fn ensure_round(&mut self, round: u32) -> Result<()> {
        if !self.rounds.contains_key(&round) && tasks_path(&self.root, round).exists() {
            self.reload_round(round)?;
        }
        Ok(())
    }

    pub fn progress(&self, round: u32) -> Result<Progress> {
        Ok(self.round(round)?.progress())
    }

    fn round(&self, round: u32) -> Result<&RoundQueue> {
        self.rounds.get(&round).ok_or(ServiceError::UnknownRound(round))
    }

    fn round_mut(&mut self, round: u32) -> Result<&mut RoundQueue> {
        self.rounds.get_mut(&round).ok_or(ServiceError::UnknownRound(round))
    }

    fn side_view(&self, c: &Candidate) -> Result<SideView> {
        Ok(SideView {
            transcript: env::transcript(c, &self.vocab)?,
            contour: env::pitch_contour(c, &self.vocab)?,
        })
    }

    pub fn next_pair(&mut self, round: u32, annotator: &str, now: u64) -> Result<NextPair> {
        let q = self.round_mut(round)?;
        q.expire(now);
        let progress = q.progress();
        if progress.voted == progress.total {
            return Ok(NextPair::RoundComplete {
                schema_version: API_SCHEMA_VERSION,
                progress,
            });
        }
        let seen = q.served.entry(annotator.to_owned()).or_default();
        let pick = (0..q.tasks.len()).find(|i| q.status[*i] == Status::Pending && !seen.contains(i));
        let Some(i) = pick else {
            let in_flight = q.status.iter().filter(|s| matches!(s, Status::InFlight { .. })).count();
            return Ok(NextPair::Waiting {
                schema_version: API_SCHEMA_VERSION,
                in_flight,
                progress,
            });
        };
        seen.insert(i);
        let expires_at = now + TASK_TTL_MS;
        q.status[i] = Status::InFlight {
            annotator: annotator.to_owned(),
            expires_at,
        };
        let task = q.tasks[i].clone();
        let ((a, _), (b, _)) = task.sides();
        Ok(NextPair::Task {
            schema_version: API_SCHEMA_VERSION,
            task: TaskView {
                task_id: task.task_id.clone(),
                round,
                text: task.target_text.clone(),
                side_a: self.side_view(a)?,
                side_b: self.side_view(b)?,
                expires_at_ms: expires_at,
            },
            progress,
        })
    }

    fn locate(&self, task_id: &str) -> Result<(u32, usize)> {
        self.rounds
            .iter()
            .find_map(|(&r, q)| q.index.get(task_id).map(|&i| (r, i)))
            .ok_or_else(|| ServiceError::UnknownTask(task_id.to_owned()))
    }

    pub fn submit_vote(&mut self, req: &VoteRequest, now: u64) -> Result<VoteAck> {
        let (round, i) = self.locate(&req.task_id)?;
        let q = self.round_mut(round)?;
        let conflict = |reason: &str| ServiceError::Conflict {
            task_id: req.task_id.clone(),
            reason: reason.into(),
        };
        match q.status[i].clone() {
            Status::Voted { annotator, choice } => {
                return if annotator == req.annotator_id && choice == req.choice {
                    Ok(VoteAck {
                        schema_version: API_SCHEMA_VERSION,
                        task_id: req.task_id.clone(),
                        recorded: true,
                        progress: q.progress(),
                    })
                } else {
                    Err(conflict("already voted"))
                };
            }
            Status::Pending => return Err(conflict("not assigned to this annotator")),
            Status::InFlight { annotator, expires_at } => {
                if annotator != req.annotator_id {
                    return Err(conflict("assigned to another annotator"));
                }
                if expires_at <= now {
                    q.status[i] = Status::Pending;
                    return Err(conflict("expired; returned to the queue"));
                }
            }
        }
        let task = &q.tasks[i];
        let ((a, sys_a), (b, sys_b)) = task.sides();
        let (preferred, dispreferred) = match req.choice {
            Choice::A => (a, b),
            Choice::B => (b, a),
        };
        let vote = (sys_a != sys_b).then(|| VoteRecord {
            schema_version: VOTE_SCHEMA_VERSION,
            vote_id: format!("{}:{}", task.task_id, req.annotator_id),
            system_a: sys_a.to_owned(),
            system_b: sys_b.to_owned(),
            winner: match req.choice {
                Choice::A => Winner::A,
                Choice::B => Winner::B,
            },
            annotator_id: req.annotator_id.clone(),
            timestamp: now,
            prompt_id: task.prompt_id.clone(),
        });
        let entry = JournalEntry {
            schema_version: API_SCHEMA_VERSION,
            task_id: task.task_id.clone(),
            annotator_id: req.annotator_id.clone(),
            choice: req.choice,
            timestamp: now,
            pair: PreferencePair {
                schema_version: PAIRS_SCHEMA_VERSION,
                round,
                prompt_id: task.prompt_id.clone(),
                preferred: preferred.clone(),
                dispreferred: dispreferred.clone(),
                source: PairSource::Human,
                annotator_id: req.annotator_id.clone(),
                timestamp: now,
            },
            vote,
        };
        let mut line = serde_json::to_vec(&entry).map_err(std::io::Error::from)?;
        line.push(b'\n');
        q.journal_file.write_all(&line)?;
        q.journal_file.sync_data()?;
        q.journal.push(entry);
        q.status[i] = Status::Voted {
            annotator: req.annotator_id.clone(),
            choice: req.choice,
        };
        Ok(VoteAck {
            schema_version: API_SCHEMA_VERSION,
            task_id: req.task_id.clone(),
            recorded: true,
            progress: q.progress(),
        })
    }

    pub fn pairs(&self, round: u32) -> Result<Vec<PreferencePair>> {
        Ok(self.round(round)?.journal.iter().map(|e| e.pair.clone()).collect())
    }

    pub fn votes(&self, round: u32) -> Result<Vec<VoteRecord>> {
        Ok(self.round(round)?.journal.iter().filter_map(|e| e.vote.clone()).collect())
    }

    /// Writes the round's pairs and votes files.
    pub fn export(&self, round: u32, partial: bool) -> Result<ExportSummary> {
        let progress = self.progress(round)?;
        let complete = progress.voted == progress.total;
        if !complete && !partial {
            return Err(ServiceError::Incomplete {
                round,
                missing: progress.total - progress.voted,
            });
        }
        let (pairs_path, votes_path) = export_paths(&self.root, round);
        crate::dpo::write_pairs(&pairs_path, &self.pairs(round)?).map_err(|e| match e {
            crate::dpo::DpoError::Io(e) => ServiceError::Io(e),
            other => ServiceError::BadTask(other.to_string()),
        })?;
        let mut buf = Vec::new();
        elo::write_votes(&mut buf, &self.votes(round)?)?;
        fs::write(&votes_path, buf)?;
        Ok(ExportSummary {
            schema_version: API_SCHEMA_VERSION,
            round,
            count: progress.voted,
            complete,
            pairs_path,
            votes_path,
        })
    }

    /// Every vote across rounds, in timestamp order (stable across rounds).
    pub fn all_votes(&self) -> Vec<VoteRecord> {
        let mut v: Vec<VoteRecord> = self
            .rounds
            .values()
            .flat_map(|q| q.journal.iter().filter_map(|e| e.vote.clone()))
            .collect();
        v.sort_by_key(|r| r.timestamp);
        v
    }

    pub fn leaderboard(&self) -> Result<Leaderboard> {
        let votes = self.all_votes();
        let table = elo::aggregate(&votes, &elo::systems_in(&votes), &self.elo)?;
        Ok(Leaderboard {
            schema_version: API_SCHEMA_VERSION,
            rows: table.leaderboard(),
        })
    }
}

#[cfg(test)]
mod tests;
