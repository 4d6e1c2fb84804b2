//! Reproducibility manifest written next to every output file.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use groundguide::decode::{DEFAULT_GAMMA, DEFAULT_MAX_TOKENS, DEFAULT_QUERY, DEFAULT_SEED};
use groundguide::guidance::{AggregationMode, EmptyGuidancePolicy, TemplateSet, Thresholds};
use groundguide::{DynamicGammaConfig, Sampler};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Which model produced the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub spec: String,
    pub model_name: String,
    pub vocab_size: usize,
    pub eos_token: u32,
}

/// Every knob that affects generated outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub gamma: f64,
    pub dynamic_gamma: Option<DynamicGammaConfig>,
    pub thresholds: Thresholds,
    pub aggregation: AggregationMode,
    pub template_set: TemplateSet,
    pub empty_guidance: EmptyGuidancePolicy,
    pub sampler: Sampler,
    pub seed: u64,
    pub max_tokens: usize,
    pub query: String,
    pub sample: Option<usize>,
    pub backend: Option<BackendIdentity>,
}

impl Default for ConfigSnapshot {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            dynamic_gamma: None,
            thresholds: Thresholds::default(),
            aggregation: AggregationMode::Intersection,
            template_set: TemplateSet::Intersec,
            empty_guidance: EmptyGuidancePolicy::Degrade,
            sampler: Sampler::Greedy,
            seed: DEFAULT_SEED,
            max_tokens: DEFAULT_MAX_TOKENS,
            query: DEFAULT_QUERY.to_string(),
            sample: None,
            backend: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub config: ConfigSnapshot,
    /// Command-specific settings not covered by `config`.
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<InputDigest>,
    pub started_at_unix_ms: u128,
    pub finished_at_unix_ms: u128,
}

impl RunManifest {
    pub fn new(command: &str, config: ConfigSnapshot) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config,
            parameters: BTreeMap::new(),
            inputs: Vec::new(),
            started_at_unix_ms: now_ms(),
            finished_at_unix_ms: 0,
        }
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).expect("parameter serializes");
        self.parameters.insert(key.to_string(), value);
    }

    pub fn add_input(&mut self, path: &Path) -> io::Result<()> {
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256: sha256_file(path)? });
        Ok(())
    }

    /// Stamps the finish time and writes `<output>.manifest.json`.
    pub fn finish(mut self, output: &Path) -> io::Result<PathBuf> {
        self.finished_at_unix_ms = now_ms();
        let path = manifest_path(output);
        let mut text = serde_json::to_string_pretty(&self).map_err(io::Error::other)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}
