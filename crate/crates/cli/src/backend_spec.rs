//! `--backend` parsing: where the model lives.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use groundguide::bridge::BridgeClient;
use groundguide::toylm::{make_biased_fixture, TableModel};
use groundguide::{BackendError, ModelBackend};

/// Name of the built-in biased table model for `toy:@biased`.
pub const BUILTIN_BIASED: &str = "@biased";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    /// In-process table model: a fixture path, or `@biased`.
    Toy(String),
    Tcp(String),
    /// Child process speaking the bridge protocol over stdio.
    Spawn(Vec<String>),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| format!("backend `{s}` must look like toy:PATH, tcp:HOST:PORT or spawn:CMD"))?;
        if rest.trim().is_empty() {
            return Err(format!("backend `{s}` has an empty target"));
        }
        match kind {
            "toy" => Ok(BackendSpec::Toy(rest.to_string())),
            "tcp" => Ok(BackendSpec::Tcp(rest.to_string())),
            "spawn" => Ok(BackendSpec::Spawn(rest.split_whitespace().map(String::from).collect())),
            other => Err(format!("unknown backend kind `{other}`")),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Toy(p) => write!(f, "toy:{p}"),
            BackendSpec::Tcp(a) => write!(f, "tcp:{a}"),
            BackendSpec::Spawn(argv) => write!(f, "spawn:{}", argv.join(" ")),
        }
    }
}

/// Loads a table model from a fixture path or the built-in name.
pub fn load_table_model(target: &str) -> Result<TableModel, String> {
    if target == BUILTIN_BIASED {
        return Ok(make_biased_fixture().model);
    }
    TableModel::load(&PathBuf::from(target)).map_err(|e| format!("{target}: {e}"))
}

pub enum OpenError {
    /// The spec pointed at a bad local file.
    Input(String),
    Backend(BackendError),
}

impl BackendSpec {
    pub fn open(&self, timeout: Duration) -> Result<Box<dyn ModelBackend>, OpenError> {
        match self {
            BackendSpec::Toy(target) => Ok(Box::new(load_table_model(target).map_err(OpenError::Input)?)),
            BackendSpec::Tcp(addr) => {
                Ok(Box::new(BridgeClient::connect_tcp(addr.as_str(), timeout).map_err(OpenError::Backend)?))
            }
            BackendSpec::Spawn(argv) => {
                let (program, args) = argv.split_first().expect("non-empty by construction");
                Ok(Box::new(BridgeClient::spawn(program, args, timeout).map_err(OpenError::Backend)?))
            }
        }
    }
}
