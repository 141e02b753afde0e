use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use pgfl_core::bayes::posterior_partition_clutter;
use pgfl_core::{partitions, Error, MeasurementSet};
use pgfl_sim::config::ScenarioConfig;
use pgfl_sim::run::{run, write_outputs, RunError};
use pgfl_sim::verify::{self, Level};

/// Exact multi-object filtering on finite spaces.
///
/// Set PGFL_THREADS to cap the number of worker threads.
#[derive(Parser)]
#[command(name = "pgfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and filter it, writing run.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Accumulate the update in the log domain.
        #[arg(long)]
        log_domain: bool,
        /// Overrides the seed of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// One Bayes update of the config's prior; prints the posterior.
    Update {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated observation labels; empty for no measurements.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        measurements: Vec<String>,
        #[arg(long)]
        log_domain: bool,
    },
    /// Run the randomized oracle suite.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        level: Level,
    },
    /// List the set partitions of {0, .., m-1}.
    Partitions {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        max_block: Option<usize>,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("PGFL_THREADS") {
        let n: usize = v.parse().with_context(|| format!("PGFL_THREADS={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load(config: &Path, log_domain: bool, seed: Option<u64>) -> anyhow::Result<pgfl_sim::config::Scenario> {
    let mut cfg = ScenarioConfig::load(config)?;
    cfg.log_domain |= log_domain;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.build()
}

fn execute(cmd: Command) -> Result<(), RunError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cmd {
        Command::Run { config, out_dir, log_domain, seed } => {
            let scenario = load(&config, log_domain, seed)?;
            let record = run(&scenario)?;
            let (csv, json) = write_outputs(&record, &out_dir)?;
            eprintln!("wrote {} and {}", csv.display(), json.display());
        }
        Command::Update { config, measurements, log_domain } => {
            let scenario = load(&config, log_domain, None)?;
            let labels: Vec<&str> = measurements.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
            let z = MeasurementSet::from_labels(&scenario.obs_space, &labels).map_err(anyhow::Error::new)?;
            let clutter = scenario.filter_clutter()?;
            match posterior_partition_clutter(&scenario.prior, &scenario.kernel, &clutter, &z, scenario.update_options()) {
                Ok(post) => {
                    writeln!(out, "{}", post.density.to_json()).context("writing posterior")?;
                    eprintln!("log_evidence {}", post.log_evidence);
                }
                Err(Error::ZeroEvidence) => {
                    return Err(RunError::ZeroEvidence { step: 1, measurements: labels.iter().map(|s| s.to_string()).collect() })
                }
                Err(e) => return Err(anyhow::Error::new(e).into()),
            }
        }
        Command::Verify { level } => {
            let ok = verify::run(level, &mut out).context("writing report")?;
            if !ok {
                return Err(anyhow::anyhow!("verification failed").into());
            }
        }
        Command::Partitions { m, max_block } => {
            let mut count = 0usize;
            for p in partitions(m, max_block) {
                let text: String = p
                    .blocks()
                    .iter()
                    .map(|b| format!("{{{}}}", b.iter().map(usize::to_string).collect::<Vec<_>>().join(",")))
                    .collect();
                writeln!(out, "{text}").context("writing partitions")?;
                count += 1;
            }
            writeln!(out, "# {count} partitions").context("writing partitions")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                RunError::Other(inner) => eprintln!("error: {inner:#}"),
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
