//! `dsaudit`: audit Android-style permission grants against declared data
//! practices, from one-shot analysis to a full simulated pipeline.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use dsaudit_core::AnalystKind;

#[derive(Parser)]
#[command(name = "dsaudit", version, about = "Permission vs. data-safety consistency auditor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
enum AnalystArg {
    #[default]
    Rules,
    External,
}

impl From<AnalystArg> for AnalystKind {
    fn from(arg: AnalystArg) -> AnalystKind {
        match arg {
            AnalystArg::Rules => AnalystKind::Rules,
            AnalystArg::External => AnalystKind::External,
        }
    }
}

/// Flags shared by every command that runs the analysis pipeline.
#[derive(Debug, clap::Args)]
struct AnalystFlags {
    /// Which analyst produces the verdict.
    #[arg(long, value_enum, default_value_t = AnalystArg::Rules)]
    analyst: AnalystArg,
    /// Send the external analyst the bare prompt, without retrieved context.
    #[arg(long)]
    no_retrieval: bool,
    /// Generation endpoint URL; required with --analyst external.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a knowledge-base snapshot from raw data files.
    BuildKb {
        /// Directory with permissions.json, categories.json, mapping.json.
        #[arg(long, default_value = "crates/core/data/kb")]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "bundled-v1")]
        version: String,
    },
    /// Check a knowledge-base snapshot for internal consistency.
    ValidateKb {
        /// Snapshot file; defaults to the bundled knowledge base.
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Normalize one declared-behavior fixture and print it.
    Ingest {
        #[arg(long)]
        package: String,
        /// Fixture root containing runtime/ and declared/.
        #[arg(long, default_value = "fixtures")]
        fixtures: PathBuf,
    },
    /// Analyze one package and print the consistency report.
    Analyze {
        #[arg(long)]
        package: String,
        #[arg(long, default_value = "fixtures")]
        fixtures: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[command(flatten)]
        analyst: AnalystFlags,
        /// Print the machine-readable document instead of the table.
        #[arg(long)]
        json: bool,
        /// Also write the machine-readable document here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a scenario through the full pipeline and print the warnings.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "fixtures")]
        fixtures: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[command(flatten)]
        analyst: AnalystFlags,
        /// Pace installs by their scenario timestamps.
        #[arg(long)]
        realtime: bool,
        /// Persist the analysis store here instead of in memory.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Write the receipt log (line-delimited JSON) here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
    },
    /// Run the analysis server, optionally feeding it scenarios.
    Serve {
        #[arg(long, default_value = "fixtures")]
        fixtures: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[command(flatten)]
        analyst: AnalystFlags,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Scenario files replayed onto the bus after startup.
        #[arg(long)]
        scenario: Vec<PathBuf>,
        /// Stop after this long; without it the server runs until killed.
        #[arg(long)]
        duration_secs: Option<u64>,
        #[arg(long)]
        realtime: bool,
    },
    /// Batch-analyze a corpus and print verdict statistics.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "fixtures")]
        fixtures: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Worker threads; 0 picks automatically.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Drop cached analyses for a package name or a KB snapshot version.
    Evict {
        #[arg(long)]
        store: PathBuf,
        /// Package name (dotted) or KB snapshot version.
        target: String,
    },
}

/// Usage problems exit 1, bad or missing data exits 2.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    fn data(err: impl std::fmt::Display) -> CliError {
        CliError::Data(err.to_string())
    }
}

fn init_logging() {
    use tracing_subscriber::EnvFilter;
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.code())
        }
    }
}
