use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aurora_core::experiment::{self, verify, ExperimentConfig, ExperimentKind, Report};
use aurora_core::Error;
use clap::{Parser, Subcommand};
use serde_json::json;

/// Runs the adapter experiments and writes report.csv / report.json.
#[derive(Debug, Parser)]
#[command(name = "aurora-bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config; every key has a default.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory for the reports.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,

    /// Run a single seed.
    #[arg(long, global = true, value_name = "N", conflicts_with = "seeds")]
    seed: Option<u64>,

    /// Comma-separated seed list.
    #[arg(long, global = true, value_name = "N,N,...", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Comma-separated ranks (rank sweep), or a single rank for the others.
    #[arg(long, global = true, value_name = "R,R,...", value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Run the invariant suite.
    Verify,
    MatrixApprox,
    GradBounds,
    MergeDivergence,
    RankSweep,
    DeltaPca,
    LeakyCase,
    ToyTask,
}

impl Command {
    fn kind(self) -> Option<ExperimentKind> {
        Some(match self {
            Command::Verify => return None,
            Command::MatrixApprox => ExperimentKind::MatrixApprox,
            Command::GradBounds => ExperimentKind::GradBounds,
            Command::MergeDivergence => ExperimentKind::MergeDivergence,
            Command::RankSweep => ExperimentKind::RankSweep,
            Command::DeltaPca => ExperimentKind::DeltaPca,
            Command::LeakyCase => ExperimentKind::LeakyCase,
            Command::ToyTask => ExperimentKind::ToyTask,
        })
    }
}

/// One JSON object on stderr, so callers can parse failures.
fn error_line(kind: &str, message: &str, path: Option<&Path>) {
    let mut obj = json!({ "error": kind, "message": message });
    if let Some(p) = path {
        obj["path"] = json!(p.display().to_string());
    }
    eprintln!("{obj}");
}

fn apply_overrides(cli: &Cli, kind: ExperimentKind, config: &mut ExperimentConfig) -> Result<(), Error> {
    if let Some(seed) = cli.seed {
        config.train.seeds = vec![seed];
    }
    if let Some(seeds) = &cli.seeds {
        config.train.seeds.clone_from(seeds);
    }
    if let Some(ranks) = &cli.ranks {
        match (kind, ranks.as_slice()) {
            (ExperimentKind::RankSweep, _) => config.adapter.ranks.clone_from(ranks),
            (_, [r]) => config.adapter.rank = *r,
            _ => {
                return Err(Error::Config(format!(
                    "{} takes a single rank, got {ranks:?}",
                    kind.as_str()
                )))
            }
        }
    }
    Ok(())
}

fn summarize(report: &Report) {
    println!("{} config_hash={}", report.kind.as_str(), report.config_hash);
    for a in &report.aggregates {
        let success = a
            .success_fraction
            .map(|f| format!(" below_oracle={f:.2}"))
            .unwrap_or_default();
        println!(
            "  {:<16} r={:<3} {:<22} n={} median={:.6e} mean={:.6e} std={:.2e}{success}",
            a.method, a.rank, a.metric_name, a.count, a.median, a.mean, a.std
        );
    }
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    let Some(kind) = cli.command.kind() else {
        let seed = cli.seed.unwrap_or(0);
        let summary = verify::run_all(seed);
        for c in summary.failures() {
            println!("FAIL {}: {}", c.name, c.detail);
        }
        println!("{}", summary.line());
        return Ok(if summary.passed() {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        });
    };
    let mut config = match &cli.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Io {
                    path: path.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "config file not found"),
                });
            }
            ExperimentConfig::load(path)?
        }
        None => ExperimentConfig::default(),
    };
    apply_overrides(cli, kind, &mut config)?;
    let report = experiment::run(kind, &config)?;
    report.write_to_dir(&cli.out)?;
    summarize(&report);
    println!("wrote {}", cli.out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            error_line("usage", first, None);
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            let path = e.path().map(Path::to_path_buf).or_else(|| match &e {
                Error::Config(_) => cli.config.clone(),
                _ => None,
            });
            error_line(e.kind(), &e.to_string(), path.as_deref());
            ExitCode::FAILURE
        }
    }
}
