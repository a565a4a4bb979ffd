//! `apdgain`: batch commands over `apd-core`.
//!
//! Each run writes its artifact plus `<artifact>.manifest.json` holding the
//! resolved configuration, seed and versions. Artifacts depend only on the
//! configuration and seed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
mod commands;
mod output;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

use crate::args::Cli;

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum CliError {
    Validation { kind: String, message: String },
    Runtime { kind: String, message: String },
}

impl CliError {
    pub fn validation(kind: &str, message: impl Into<String>) -> Self {
        CliError::Validation {
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn runtime(kind: &str, message: impl Into<String>) -> Self {
        CliError::Runtime {
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. } => 2,
            CliError::Runtime { .. } => 1,
        }
    }
}

impl fmt::Display for CliError {
    /// Single line: `error: kind=<kind> message=<text>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, message) = match self {
            CliError::Validation { kind, message } | CliError::Runtime { kind, message } => (kind, message),
        };
        let flat: Vec<&str> = message.split_whitespace().collect();
        write!(f, "error: kind={kind} message={}", flat.join(" "))
    }
}

impl From<apd_core::Error> for CliError {
    fn from(e: apd_core::Error) -> Self {
        if e.is_validation() {
            CliError::validation(e.kind(), e.to_string())
        } else {
            CliError::runtime(e.kind(), e.to_string())
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::validation("usage", first));
            return 2;
        }
    };
    let result = match cli.workers {
        Some(0) => Err(CliError::validation("invalid-parameter", "--workers must be at least 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| commands::dispatch(cli.command)),
            Err(e) => Err(CliError::runtime("thread-pool", e.to_string())),
        },
        None => commands::dispatch(cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
