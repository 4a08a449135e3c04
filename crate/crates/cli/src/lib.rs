//! Command-line front end for the modular reasoning engine.
//!
//! One binary, six workflows: `gen-data`, `train`, `eval`, `bench`,
//! `ablate` and `attribute`. Each run resolves its configuration, writes
//! its outputs plus a `manifest-<command>.json` into the output directory and exits
//! with 0 on success, 1 on an engine failure and 2 on a usage or
//! configuration error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use thiserror::Error;

pub use commands::{run_command, COMMANDS};
pub use config::{load_config, CliConfig, FlagOverrides, Settings, Source};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("unknown command `{0}` (expected one of: gen-data, train, eval, bench, ablate, attribute)")]
    UnknownCommand(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("engine error: {0}")]
    Engine(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Engine(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn engine(e: impl std::fmt::Display) -> Self {
        CliError::Engine(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "modrl", version, about = "Parallel modular reasoning engine")]
struct Args {
    /// gen-data | train | eval | bench | ablate | attribute
    command: String,
    /// TOML config file layered over the defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Bench latency preset.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Per-field override, e.g. `--set train.eta=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let flags = FlagOverrides {
        seed: args.seed,
        out: args.out,
        preset: args.preset,
        set: args.set,
    };
    let result = load_config(&args.command, args.config.as_deref(), &flags).and_then(|cfg| run_command(&cfg));
    match result {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("modrl: {e}");
            e.exit_code()
        }
    }
}
