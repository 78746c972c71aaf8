//! `sfgen`: run one stage of the experiment pipeline.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for numerical or
//! budget failures, 1 for anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::{Level, LevelFilter, Metadata, Record};
use sfgen_core::harness::{run_stage_file, Stage};
use sfgen_core::SfError;

#[derive(Parser)]
#[command(
    name = "sfgen",
    version,
    about = "Controllable sequence generation with successor features",
    after_help = "Stages, in order: train-lm, train-features, fit-subject (optional), \
                  train-sf, generate, evaluate, oracle-check."
)]
struct Cli {
    /// Pipeline stage to run
    stage: String,

    /// Experiment config file (flat key = value lines)
    #[arg(long)]
    config: PathBuf,

    /// Override the config's random seed
    #[arg(long)]
    seed: Option<u64>,

    /// Override the config's output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Plain stderr logger; verbosity from `SFGEN_LOG` (error..trace, default info).
struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, _: &Metadata) -> bool {
        true
    }

    fn log(&self, record: &Record) {
        if self.enabled(record.metadata()) {
            let tag = match record.level() {
                Level::Error => "error",
                Level::Warn => "warn",
                Level::Info => "info",
                Level::Debug => "debug",
                Level::Trace => "trace",
            };
            eprintln!("[{tag}] {}", record.args());
        }
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

fn init_logger() {
    let level = match std::env::var("SFGEN_LOG").as_deref() {
        Ok("error") => LevelFilter::Error,
        Ok("warn") => LevelFilter::Warn,
        Ok("debug") => LevelFilter::Debug,
        Ok("trace") => LevelFilter::Trace,
        Ok("off") => LevelFilter::Off,
        _ => LevelFilter::Info,
    };
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(level);
}

fn exit_code(err: &SfError) -> ExitCode {
    match err {
        SfError::Config(_) => ExitCode::from(2),
        SfError::Numerical(_) | SfError::Budget(_) => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logger();
    let stage = match Stage::parse(&cli.stage) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("sfgen: {e}");
            return exit_code(&e);
        }
    };
    match run_stage_file(stage, &cli.config, cli.seed, cli.out.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sfgen: {e}");
            exit_code(&e)
        }
    }
}
