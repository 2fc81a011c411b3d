use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub const RUNTIME: u8 = 1;
    pub const CONFIG: u8 = 2;
    /// Fewer than two cameras ever contributed observations.
    pub const UNOBSERVABLE: u8 = 3;

    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: Self::CONFIG,
            error: error.into(),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: Self::RUNTIME,
            error: error.into(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Parses a JSON input file; any failure is a configuration error.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::config)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::config)
}
