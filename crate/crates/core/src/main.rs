//! `prosody-lab`: run experiments from a TOML config.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 a human-labeled round is still collecting votes (rerun to resume).

use std::fs;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};

use prosody_lab::config::{ConfigError, ExperimentConfig, JudgeKind, RewardPreset};
use prosody_lab::dpo::DpoInit;
use prosody_lab::elo::{self, VoteRecord};
use prosody_lab::pipeline::{self, DpoStatus, PipelineError};
use prosody_lab::policy::read_checkpoint;
use prosody_lab::report;
use prosody_lab::service::http::{serve, AppState};
use prosody_lab::service::{Store, SystemClock};

#[derive(Debug, Parser)]
#[command(
    name = "prosody-lab",
    version,
    about = "GRPO, iterative DPO and ELO on a toy speech-token environment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a config file and print the effective configuration.
    ValidateConfig { config: PathBuf },
    /// Train GRPO from the base checkpoint.
    TrainGrpo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<RewardPreset>,
        /// Override `grpo.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Run directory; defaults to `{output_dir}/grpo-{preset}`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run or resume iterative DPO rounds.
    DpoRounds {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long, value_enum)]
        judge: Option<JudgeKind>,
        /// Start round 1 from this checkpoint instead of the base.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// Run directory; defaults to `{output_dir}/dpo`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one round of oracle-labeled preference pairs.
    GenPairs {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        round: u32,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle-judged blind votes between checkpoints.
    SimulateVotes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 600)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate vote logs into a leaderboard CSV.
    Elo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "votes", num_args = 1..)]
        votes: Vec<PathBuf>,
        /// Print the published leaderboard fixture instead.
        #[arg(long)]
        published: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate run directories and write the results table and figure data.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "run", num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long = "votes", num_args = 1..)]
        votes: Vec<PathBuf>,
        /// Append the published rows as fixtures.
        #[arg(long)]
        published: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the labeling queue over HTTP.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
}

/// Failure classes that map to distinct exit codes.
enum Failure {
    Config(anyhow::Error),
    Waiting(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let config = e.chain().any(|c| {
            c.downcast_ref::<ConfigError>().is_some() || matches!(c.downcast_ref::<PipelineError>(), Some(PipelineError::Config(_)))
        });
        if config {
            Self::Config(e)
        } else {
            Self::Other(e)
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| Failure::Config(anyhow::Error::from(e).context(format!("config {}", path.display()))))
}

fn read_vote_logs(paths: &[PathBuf]) -> anyhow::Result<Vec<VoteRecord>> {
    let mut all = Vec::new();
    for p in paths {
        let f = fs::File::open(p).with_context(|| format!("open {}", p.display()))?;
        all.extend(elo::read_votes(BufReader::new(f)).with_context(|| format!("read {}", p.display()))?);
    }
    all.sort_by_key(|v| v.timestamp);
    Ok(all)
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("write {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::ValidateConfig { config } => {
            let cfg = load(&config)?;
            print!("{}", cfg.to_toml());
        }
        Command::TrainGrpo {
            config,
            preset,
            steps,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(n) = steps {
                cfg.grpo.steps = n;
            }
            let name = preset.map_or_else(|| "grpo".to_owned(), pipeline::grpo_version);
            let dir = out.unwrap_or_else(|| cfg.output_dir.join(name));
            let r = pipeline::train_grpo_run(&cfg, preset, &dir)?;
            println!(
                "{}: std_logf0 {:.4} -> {:.4}, cer {:.4} -> {:.4}, nonterm {:.3} -> {:.3}",
                r.version,
                r.before.std_logf0,
                r.after.std_logf0,
                r.before.mean_cer,
                r.after.mean_cer,
                r.before.nonterm_rate,
                r.after.nonterm_rate
            );
            println!("wrote {}", dir.display());
        }
        Command::DpoRounds {
            config,
            rounds,
            judge,
            init_checkpoint,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(r) = rounds {
                cfg.dpo.rounds = r;
            }
            let init = match init_checkpoint {
                Some(p) => {
                    cfg.dpo.init = DpoInit::Grpo;
                    Some(read_checkpoint(&p).with_context(|| format!("checkpoint {}", p.display()))?)
                }
                None => None,
            };
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("dpo"));
            let kind = judge.unwrap_or(cfg.judge.kind);
            match pipeline::dpo_rounds_run(&cfg, kind, init, &dir)? {
                DpoStatus::Complete(reports) => {
                    for r in reports {
                        println!(
                            "{}: loss {:.4} -> {:.4}, pair accuracy {:.3}, {}",
                            r.version, r.loss_start, r.loss_end, r.pair_accuracy, r.checkpoint_hash
                        );
                    }
                }
                DpoStatus::Waiting { round, missing, total, .. } => {
                    return Err(Failure::Waiting(format!(
                        "round {round} is waiting for votes: {missing} of {total} missing; serve the queue under {} and rerun",
                        cfg.service_root().display()
                    )));
                }
            }
        }
        Command::GenPairs {
            config,
            checkpoint,
            round,
            n,
            out,
        } => {
            let cfg = load(&config)?;
            let policy = read_checkpoint(&checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
            let k = pipeline::gen_pairs(&cfg, &policy, round, n.unwrap_or(cfg.dpo.pairs_per_round), &out)?;
            println!("wrote {k} pairs to {}", out.display());
        }
        Command::SimulateVotes {
            config,
            checkpoints,
            n,
            seed,
            out,
        } => {
            let cfg = load(&config)?;
            let systems = checkpoints
                .iter()
                .map(|p| read_checkpoint(p).with_context(|| format!("checkpoint {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let votes = pipeline::simulate_votes(&cfg, &systems, n, seed)?;
            let mut buf = Vec::new();
            elo::write_votes(&mut buf, &votes).context("encode votes")?;
            fs::write(&out, buf).with_context(|| format!("write {}", out.display()))?;
            println!(
                "wrote {} votes ({} ties skipped) to {}",
                votes.len(),
                n - votes.len(),
                out.display()
            );
        }
        Command::Elo {
            config,
            votes,
            published,
            out,
        } => {
            let rows = if published {
                elo::published_leaderboard()
            } else {
                if votes.is_empty() {
                    return Err(Failure::Config(anyhow::anyhow!("pass --votes FILE... or --published")));
                }
                let cfg = match config {
                    Some(p) => load(&p)?,
                    None => ExperimentConfig::default(),
                };
                let all = read_vote_logs(&votes)?;
                elo::aggregate(&all, &elo::systems_in(&all), &cfg.elo)
                    .context("aggregate votes")?
                    .leaderboard()
            };
            emit(out.as_deref(), &elo::leaderboard_csv(&rows))?;
        }
        Command::Report {
            config,
            runs,
            votes,
            published,
            out,
        } => {
            let cfg = load(&config)?;
            let votes = read_vote_logs(&votes)?;
            let dirs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
            let rows = report::write_report(&cfg, &dirs, &votes, published, &out)?;
            print!("{}", report::table_csv(&rows));
        }
        Command::Serve { config, host, port } => {
            let mut cfg = load(&config)?;
            if let Some(h) = host {
                cfg.service.host = h;
            }
            if let Some(p) = port {
                cfg.service.port = p;
            }
            let addr: SocketAddr = format!("{}:{}", cfg.service.host, cfg.service.port)
                .parse()
                .map_err(|e| Failure::Config(anyhow::anyhow!("service address: {e}")))?;
            let s = pipeline::scenario(&cfg)?;
            let root = cfg.service_root();
            fs::create_dir_all(&root).with_context(|| format!("create {}", root.display()))?;
            let store = Store::open(&root, s.vocab, cfg.elo).context("open queue")?;
            eprintln!("serving {} on http://{addr}", root.display());
            let rt = tokio::runtime::Runtime::new().context("start runtime")?;
            rt.block_on(serve(addr, AppState::new(store, Arc::new(SystemClock))))
                .context("serve")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Waiting(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
