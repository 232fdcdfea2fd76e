//! Command implementations behind the `rlqr` binary.

pub mod commands;
pub mod config;
pub mod manifest;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable config, malformed values.
    #[error("{0}")]
    Usage(String),
    #[error("invalid `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error(transparent)]
    Run(rlqr::Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn config(field: &str, msg: impl Into<String>) -> Self {
        CliError::Config {
            field: field.to_string(),
            msg: msg.into(),
        }
    }

    /// Core validation errors are configuration errors; everything else is a runtime failure.
    pub fn from_config(e: rlqr::Error) -> Self {
        match e {
            rlqr::Error::Config(msg) => CliError::Usage(format!("invalid configuration: {msg}")),
            other => CliError::Run(other),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Run(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<rlqr::Error> for CliError {
    fn from(e: rlqr::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Pulls `--key value` / `--key=value` config overrides out of `args`.
///
/// Only names in [`config::KEYS`] are taken; everything else is left for clap.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(name) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match name.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (name.to_string(), None),
        };
        if !config::is_key(&key) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}
