//! Results tables and figure data from finished runs.
//!
//! Files written into the report directory:
//!
//! ```text
//! table.csv          system,source,cer_percent,std_logf0,elo,n_votes
//! bars.csv           system,rating,n_votes,source   (rated rows, best first)
//! hist_{system}.csv  bin_log_hz,count               (one per measured system)
//! manifest.json
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig};
use crate::elo::{self, LeaderRow, VoteRecord, PUBLISHED_ROWS};
use crate::env::{self, Prompt, Vocab};
use crate::eval;
use crate::pipeline::{self, PipelineError, Result, RunManifest};
use crate::policy::PolicyParams;
use crate::reward;
use crate::scenario::BASE_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowSource {
    Measured,
    Published,
}

impl RowSource {
    fn as_str(self) -> &'static str {
        match self {
            Self::Measured => "measured",
            Self::Published => "published",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub system: String,
    pub source: RowSource,
    pub cer_percent: f64,
    pub std_logf0: Option<f64>,
    pub elo: Option<f64>,
    pub n_votes: u64,
}

/// Mean CER, in percent, of greedy decodes over `prompts`.
pub fn greedy_cer_percent(params: &PolicyParams, prompts: &[Prompt], vocab: &Vocab, max_len: usize) -> Result<f64> {
    let cers = prompts
        .par_iter()
        .map(|p| {
            let c = params.greedy(p, max_len)?;
            Ok(reward::cer(&p.target_text, &env::transcript(&c, vocab)?).map_err(crate::env::EnvError::from)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(100.0 * cers.iter().sum::<f64>() / cers.len().max(1) as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("system,source,cer_percent,std_logf0,elo,n_votes\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{},{},{}",
            r.system,
            r.source.as_str(),
            r.cer_percent,
            fmt_opt(r.std_logf0),
            fmt_opt(r.elo),
            r.n_votes
        );
    }
    out
}

/// Rated rows, best first; equal ratings by name.
pub fn bars(rows: &[TableRow]) -> Vec<(LeaderRow, RowSource)> {
    let mut rated: Vec<(LeaderRow, RowSource)> = rows
        .iter()
        .filter_map(|r| {
            r.elo.map(|e| {
                let row = LeaderRow {
                    system: r.system.clone(),
                    rating: e,
                    n_votes: r.n_votes,
                };
                (row, r.source)
            })
        })
        .collect();
    rated.sort_by(|(a, _), (b, _)| b.rating.total_cmp(&a.rating).then_with(|| a.system.cmp(&b.system)));
    rated
}

pub fn bars_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("system,rating,n_votes,source\n");
    for (l, s) in bars(rows) {
        let _ = writeln!(out, "{},{:.4},{},{}", l.system, l.rating, l.n_votes, s.as_str());
    }
    out
}

/// Published rows, in their original order.
pub fn published_rows() -> Vec<TableRow> {
    PUBLISHED_ROWS
        .iter()
        .map(|r| TableRow {
            system: r.system.to_owned(),
            source: RowSource::Published,
            cer_percent: r.cer_percent,
            std_logf0: None,
            elo: r.elo,
            n_votes: 0,
        })
        .collect()
}

fn file_stem(system: &str) -> String {
    system
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Builds the report for the base checkpoint plus every checkpoint named in
/// `runs`, rated by `votes`, and writes it to `out`.
pub fn write_report(
    cfg: &ExperimentConfig,
    runs: &[&Path],
    votes: &[VoteRecord],
    include_published: bool,
    out: &Path,
) -> Result<Vec<TableRow>> {
    if runs.is_empty() && !include_published {
        return Err(ConfigError::Invalid("report needs at least one run directory or the published rows".into()).into());
    }
    let s = pipeline::scenario(cfg)?;
    let mut systems: Vec<(String, PolicyParams)> = Vec::new();
    if !runs.is_empty() {
        systems.push((BASE_VERSION.to_owned(), s.base.clone()));
    }
    for dir in runs {
        for (name, params) in pipeline::run_checkpoints(dir)? {
            if systems.iter().any(|(n, _)| *n == name) {
                return Err(PipelineError::Artifact {
                    path: dir.to_path_buf(),
                    reason: format!("system {name} appears in more than one run"),
                });
            }
            systems.push((name, params));
        }
    }
    let table = if votes.is_empty() {
        None
    } else {
        let mut names = elo::systems_in(votes);
        names.extend(systems.iter().map(|(n, _)| n.clone()));
        names.sort();
        names.dedup();
        Some(elo::aggregate(votes, &names, &cfg.elo)?)
    };

    fs::create_dir_all(out)?;
    let held = s.heldout.as_slice();
    let max_len = s.spec.max_len;
    let mut rows = Vec::new();
    let mut files = vec!["table.csv".to_owned(), "bars.csv".to_owned()];
    for (name, params) in &systems {
        let pool = eval::sample_pool(params, held, &cfg.eval)?;
        let summary = eval::summarize(&pool, held, &s.vocab)?;
        let hist = format!("hist_{}.csv", file_stem(name));
        fs::write(out.join(&hist), env::pitch_histogram_csv(&pool, &s.vocab)?)?;
        files.push(hist);
        rows.push(TableRow {
            system: name.clone(),
            source: RowSource::Measured,
            cer_percent: greedy_cer_percent(params, held, &s.vocab, max_len)?,
            std_logf0: Some(summary.std_logf0),
            elo: table.as_ref().and_then(|t| t.rating(name)),
            n_votes: table.as_ref().and_then(|t| t.votes(name)).unwrap_or(0),
        });
    }
    if include_published {
        rows.extend(published_rows());
    }
    fs::write(out.join("table.csv"), table_csv(&rows))?;
    fs::write(out.join("bars.csv"), bars_csv(&rows))?;
    let refs: Vec<&str> = files.iter().map(String::as_str).collect();
    RunManifest::new("report", cfg).write(out, &refs)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_bars_follow_the_published_ranking() {
        let b = bars(&published_rows());
        let order: Vec<&str> = b.iter().map(|(l, _)| l.system.as_str()).collect();
        assert_eq!(order.first(), Some(&"channel-base-dpo-v2"));
        assert_eq!(order.last(), Some(&"GRPO (clean)"));
        assert_eq!(b.len(), 9);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![TableRow {
            system: "a".into(),
            source: RowSource::Measured,
            cer_percent: 2.5,
            std_logf0: None,
            elo: Some(1010.0),
            n_votes: 3,
        }];
        assert_eq!(
            table_csv(&rows),
            "system,source,cer_percent,std_logf0,elo,n_votes\na,measured,2.5000,,1010.0000,3\n"
        );
        assert_eq!(bars_csv(&rows), "system,rating,n_votes,source\na,1010.0000,3,measured\n");
    }

    #[test]
    fn empty_report_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_report(&ExperimentConfig::default(), &[], &[], false, dir.path()).is_err());
    }

    #[test]
    fn stems_are_filesystem_safe() {
        assert_eq!(file_stem("GRPO (clean)"), "GRPO__clean_");
        assert_eq!(file_stem("channel-base-dpo-v2"), "channel-base-dpo-v2");
    }
}
