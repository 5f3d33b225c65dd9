//! Thin command-line front end over the elicit library.

use anyhow::bail;
use clap::{Parser, Subcommand, ValueEnum};
use elicit::aggregate::AggregationSpec;
use elicit::dataset::{self, DatasetManifest};
use elicit::metrics::{self, question_index, BinningSpec, TieMode};
use elicit::model::AggregationMode;
use elicit::reward::{RewardContext, RewardKind};
use elicit::runner::{self, RunConfig};
use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "elicit",
    version,
    about = "Confidence elicitation and calibration evaluation for chat models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Json,
    Table,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured evaluation end to end
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Append every HTTP request/response pair to this JSONL file
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Recompute metrics from a record log and print the report table
    Score {
        #[arg(long)]
        log: PathBuf,
        /// Dataset manifest; needed to resolve the multi-label Brier score
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Count tied confidence pairs as 0 in the AUROC instead of 0.5
        #[arg(long)]
        strict_auroc: bool,
    },
    /// Recompute metrics from a record log in a chosen format
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        strict_auroc: bool,
        #[arg(long, value_enum, default_value = "table")]
        format: OutputFormat,
    },
    /// Collapse a multi-sample log into one record per question
    Aggregate {
        #[arg(long)]
        log: PathBuf,
        /// "frequency" or "weighted"
        #[arg(long)]
        mode: String,
        /// Samples aggregated per question
        #[arg(long)]
        n: usize,
        /// Output JSONL path; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill in missing correctness verdicts on a record log
    Judge {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Run config describing the judge backend
        #[arg(long)]
        config: PathBuf,
        /// Verdict cache file (overrides the config's judge_cache)
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Score reasoning traces from three method logs on the 1-5 rubric
    Rubric {
        /// Record log; pass exactly three, one per method
        #[arg(long = "log")]
        logs: Vec<PathBuf>,
        /// Run config describing the judge backend
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-question scores as JSONL; stdout table either way
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve reward requests over stdin/stdout, one JSON object per line
    RewardServer {
        /// Dataset manifest resolving question ids to answer spaces
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = elicit::DEFAULT_SUM_TOLERANCE)]
        tolerance: f64,
        /// "rlcr" (calibration reward) or "rlvr" (accuracy only)
        #[arg(long, default_value = "rlcr")]
        mode: String,
    },
}

fn tie_mode(strict: bool) -> TieMode {
    if strict {
        TieMode::Strict
    } else {
        TieMode::Average
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, transcript } => {
            let mut config = RunConfig::from_file(&config)?;
            if transcript.is_some() {
                config.transcript = transcript;
            }
            let outcomes = runner::run(config)?;
            for outcome in outcomes {
                println!("== {} ==", runner::method_slug(outcome.method));
                match (&outcome.report, &outcome.skipped) {
                    (Some(report), _) => {
                        println!("{}", metrics::render_table(report));
                        if let Some(path) = &outcome.records_path {
                            println!("records: {}", path.display());
                        }
                    }
                    (None, Some(reason)) => println!("skipped: {reason}"),
                    (None, None) => {}
                }
                println!();
            }
        }
        Command::Score {
            log,
            manifest,
            bins,
            strict_auroc,
        } => {
            let (_, report) = runner::score_log(
                &log,
                manifest.as_deref(),
                &BinningSpec::new(bins),
                tie_mode(strict_auroc),
            )?;
            print!("{}", metrics::render_table(&report));
        }
        Command::Report {
            log,
            manifest,
            bins,
            strict_auroc,
            format,
        } => {
            let (_, report) = runner::score_log(
                &log,
                manifest.as_deref(),
                &BinningSpec::new(bins),
                tie_mode(strict_auroc),
            )?;
            match format {
                OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
                OutputFormat::Table => print!("{}", metrics::render_table(&report)),
                OutputFormat::Csv => print!("{}", metrics::calibration_csv(&report)),
            }
        }
        Command::Aggregate { log, mode, n, out } => {
            let mode = match mode.as_str() {
                "frequency" => AggregationMode::Frequency,
                "weighted" | "weighted_confidence" => AggregationMode::WeightedConfidence,
                other => bail!("unknown aggregation mode {other:?}"),
            };
            let spec = AggregationSpec {
                mode,
                n,
                temperature: 0.8,
            };
            let aggregated = runner::aggregate_log(&log, &spec)?;
            let mut lines = String::new();
            for record in &aggregated {
                lines.push_str(&serde_json::to_string(record)?);
                lines.push('\n');
            }
            match out {
                Some(path) => std::fs::write(path, lines)?,
                None => print!("{lines}"),
            }
        }
        Command::Judge {
            log,
            manifest,
            config,
            cache,
        } => {
            let mut run_config = RunConfig::from_file(&config)?;
            if cache.is_some() {
                run_config.judge_cache = cache;
            }
            let judge = runner::judge_from_config(&run_config)?;
            let judged = runner::judge_log(&log, &manifest, &judge)?;
            println!("judged {judged} records ({} judge calls)", judge.client_calls());
        }
        Command::Rubric {
            logs,
            config,
            seed,
            out,
        } => {
            if logs.len() != 3 {
                bail!("rubric scoring needs exactly three --log files, got {}", logs.len());
            }
            let run_config = RunConfig::from_file(&config)?;
            let judge = runner::judge_from_config(&run_config)?;
            let logs: [PathBuf; 3] = [logs[0].clone(), logs[1].clone(), logs[2].clone()];
            let outcomes = runner::rubric_logs(&logs, &judge, seed)?;
            if let Some(path) = out {
                let mut file = std::fs::File::create(path)?;
                for outcome in &outcomes {
                    writeln!(file, "{}", serde_json::to_string(outcome)?)?;
                }
            }
            print!("{}", runner::rubric_mean_table(&outcomes));
        }
        Command::RewardServer {
            manifest,
            tolerance,
            mode,
        } => {
            let kind = match mode.as_str() {
                "rlcr" => RewardKind::Rlcr,
                "rlvr" => RewardKind::Rlvr,
                other => bail!("unknown reward mode {other:?}"),
            };
            let questions = match manifest {
                Some(path) => {
                    let manifest = DatasetManifest::from_file(&path)?;
                    question_index(&dataset::load(&manifest)?)
                }
                None => HashMap::new(),
            };
            let ctx = RewardContext::new(questions, tolerance, kind);
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            elicit::reward::serve_jsonl(&ctx, stdin.lock(), stdout.lock())?;
        }
    }
    Ok(())
}
