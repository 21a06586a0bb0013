use std::path::PathBuf;
use std::process::ExitCode;

use cachepeer::commands::{self, CompareArgs, DeriveRulesArgs, Format, ReportArgs, RunArgs};
use cachepeer::CliError;
use cachepeer_core::ids::TenantId;
use clap::{Parser, Subcommand, ValueEnum};

/// Simulates cache peering between tenants of a shared micro data center.
///
/// Set CACHEPEER_LOG (e.g. `info`, `debug`) for diagnostic logging.
#[derive(Parser)]
#[command(name = "cachepeer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write the report and traces.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
    },
    /// Run a scenario with and without its peering links.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
    },
    /// Derive bypass rules from an access-log CSV.
    DeriveRules {
        #[arg(long)]
        log: PathBuf,
        /// Tenant the rules are installed for.
        #[arg(long, default_value_t = 0)]
        tenant: u32,
        /// Look-back window in seconds, ending at the last record.
        #[arg(long, default_value_t = 300.0)]
        window: f64,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long, default_value_t = 10)]
        min_samples: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a scenario file.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Re-render a JSON report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    match cmd {
        Command::Run {
            scenario,
            seed,
            out,
            format,
        } => commands::run(
            &RunArgs {
                scenario,
                seed,
                out,
                format: format.into(),
            },
            &mut stdout,
        ),
        Command::Compare {
            scenario,
            seed,
            out,
            format,
        } => commands::compare(
            &CompareArgs {
                scenario,
                seed,
                out,
                format: format.into(),
            },
            &mut stdout,
        ),
        Command::DeriveRules {
            log,
            tenant,
            window,
            threshold,
            min_samples,
            out,
        } => commands::derive(&DeriveRulesArgs {
            log,
            tenant: TenantId(tenant),
            window_s: window,
            threshold,
            min_samples,
            out,
        }),
        Command::Validate { scenario } => commands::validate(&scenario, &mut stdout),
        Command::Report { input, format, out } => commands::report(
            &ReportArgs {
                input,
                format: format.into(),
                out,
            },
            &mut stdout,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("CACHEPEER_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
