mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use chrono::DateTime;
use clap::{Args, Parser, Subcommand};

use bustr::Execution;
use config::{ConfigError, PipelineConfig};

#[derive(Parser)]
#[command(name = "bustr", version, about = "Bus travel-time model pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads. 1 runs every stage sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Working directory for all stage inputs and outputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city with GTFS, positions and traffic.
    SynthGen,
    /// Parse the feed and vehicle positions and snap reports to shapes.
    Ingest,
    /// Cut snapped traces into quantized shingles.
    Shingle,
    /// Train the configured variant and write a checkpoint.
    Train,
    /// Evaluate the checkpoint on the test weeks.
    Eval,
    /// Print the predicted travel time in seconds between two stops.
    Predict {
        route: String,
        from_stop: String,
        to_stop: String,
        /// Unix seconds or RFC 3339.
        departure: String,
    },
    /// Train every configured variant over several seeds.
    Ablate,
    /// Car-time and linear baselines on the test weeks.
    Baseline,
    /// Exact noise-free duration of a shape interval in the generated world.
    Oracle {
        shape_id: String,
        start_m: f64,
        end_m: f64,
        /// Unix seconds or RFC 3339.
        departure: String,
    },
}

fn parse_departure(s: &str) -> anyhow::Result<i64> {
    if let Ok(t) = s.parse::<i64>() {
        return Ok(t);
    }
    DateTime::parse_from_rfc3339(s)
        .map(|d| d.timestamp())
        .map_err(|e| bustr::Error::InvalidArgument(format!("departure {s:?}: {e}")).into())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = PipelineConfig::load(cli.common.config.as_deref())?.with_seed(cli.common.seed);
    config.validate()?;
    let exec = match cli.common.threads {
        Some(1) => Execution::Sequential,
        Some(n) => {
            bustr::exec::set_thread_limit(n);
            Execution::default()
        }
        None => Execution::default(),
    };
    let out = &cli.common.out;
    std::fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    match &cli.command {
        Command::SynthGen => stages::synth_gen(&config, out),
        Command::Ingest => stages::ingest(&config, out, exec),
        Command::Shingle => stages::shingle(&config, out, exec),
        Command::Train => stages::train(&config, out, exec),
        Command::Eval => stages::eval(&config, out, exec),
        Command::Ablate => stages::ablate(&config, out, exec),
        Command::Baseline => stages::baseline(&config, out, exec),
        Command::Predict {
            route,
            from_stop,
            to_stop,
            departure,
        } => {
            let q = stages::Query {
                route,
                from: from_stop,
                to: to_stop,
                departure: parse_departure(departure)?,
            };
            println!("{:.3}", stages::predict(&config, out, &q)?);
            Ok(())
        }
        Command::Oracle {
            shape_id,
            start_m,
            end_m,
            departure,
        } => {
            let secs = stages::oracle(out, shape_id, *start_m, *end_m, parse_departure(departure)?)?;
            println!("{secs:.3}");
            Ok(())
        }
    }
}

/// Stable kind for the error line: the first library or config error in the
/// chain, else `io` for file system failures and `internal` otherwise.
fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(b) = cause.downcast_ref::<bustr::Error>() {
            return b.kind();
        }
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "internal"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}")
                .replace('\\', "\\\\")
                .replace('"', "\\\"")
                .replace('\n', " ");
            eprintln!("error: kind={} msg=\"{msg}\"", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
