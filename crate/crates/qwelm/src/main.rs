//! Command-line entry point: parse and validate a run configuration, execute
//! its pipeline, and leave a reproducible artifact bundle on disk.
//!
//! Output directory resolution, most specific wins: `--out`, then the
//! config's `out_dir`, then the `QWELM_OUT` environment variable, then
//! `./qwelm_out`.  A failed run still writes `error.json` into that
//! directory and exits nonzero.

use clap::Parser;
use qwelm::config::RawRunConfig;
use qwelm::error::{QelmError, Result};
use qwelm::report::{run, write_error_record};
use std::path::PathBuf;
use std::process::ExitCode;

/// Environment variable consulted when neither `--out` nor the config names
/// an output directory.
const OUT_DIR_ENV: &str = "QWELM_OUT";

/// Quantum-walk reservoir simulator with a trainable linear readout.
#[derive(Parser)]
#[command(name = "qwelm", version, about)]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Output directory (overrides the config and QWELM_OUT).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed override; per-dataset seeds pinned in the config keep
    /// their pinned values.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,

    /// Print nothing on success; errors still go to stderr.
    #[arg(long)]
    quiet: bool,
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(QelmError::invalid("threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| QelmError::Config(format!("cannot size the thread pool: {e}")))?;
    }

    let mut raw = RawRunConfig::from_path(&cli.config)?;
    if let Some(seed) = cli.seed {
        raw.seed = Some(seed);
    }
    let config = raw.materialize()?;

    let out_dir = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("qwelm_out"));

    if !cli.quiet {
        println!(
            "running task `{}` (seed {}) into {}",
            config.task.label(),
            config.seed,
            out_dir.display()
        );
    }

    match run(&config, &out_dir) {
        Ok(bundle) => {
            if !cli.quiet {
                for file in &bundle.files {
                    println!("wrote {}", file.display());
                }
            }
            Ok(())
        }
        Err(err) => {
            // Best-effort: the error record must not mask the run failure.
            let _ = write_error_record(&out_dir, &err, Some(&config));
            Err(err)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
