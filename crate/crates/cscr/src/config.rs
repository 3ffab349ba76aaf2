//! Run configuration.
//!
//! Settings resolve in four layers, later ones winning: built-in defaults, an
//! optional TOML or JSON file, `CSCR_<SECTION>__<KEY>` environment variables
//! (nested keys joined by `__`), and command-line flags. Layers are merged as
//! JSON trees and every key must already exist in the defaults, so a typo is an
//! error rather than a silently ignored setting.
//!
//! A run is identified by the SHA-256 of the command name, the resolved
//! configuration and the digests of its input files, serialized canonically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use cscr_core::eval::{DEFAULT_GRID_POINTS, DEFAULT_LAMBDA_MAX};
use cscr_core::router::DEFAULT_K;
use cscr_core::synth::SynthConfig;
use cscr_core::{PolicyKind, ScoreRule, Split, TrainConfig};

use crate::error::{CliError, Result};
use crate::formats::{read_text, sha256_hex};

pub const ENV_PREFIX: &str = "CSCR_";
pub const RUN_DIR_ENV: &str = "CSCR_RUN_DIR";
pub const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorConfig {
    /// Token basis size for logit footprints; `None` takes `min(256, vocabulary)`.
    pub basis_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteConfig {
    pub policy: PolicyKind,
    pub lambda: f64,
    /// Neighbours retrieved before the cost-penalized pick.
    pub k: usize,
    pub rule: ScoreRule,
    /// Seed of the stochastic baselines.
    pub seed: u64,
    pub split: Split,
}

impl Default for RouteConfig {
    fn default() -> Self {
        Self { policy: PolicyKind::Cscr, lambda: 0.0, k: DEFAULT_K, rule: ScoreRule::Penalized, seed: 0, split: Split::Test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub grid_points: usize,
    pub lambda_max: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    /// Matched budget for McNemar's test; `None` uses the median of both cost grids.
    pub budget: Option<f64>,
    /// Comparison policy for significance tests.
    pub baseline: PolicyKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid_points: DEFAULT_GRID_POINTS,
            lambda_max: DEFAULT_LAMBDA_MAX,
            bootstrap_resamples: 5000,
            bootstrap_seed: 0,
            budget: None,
            baseline: PolicyKind::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub descriptors: DescriptorConfig,
    pub train: TrainConfig,
    pub route: RouteConfig,
    pub eval: EvalConfig,
}

/// Parses a flag or environment value: JSON when it parses, a bare string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// `a.b=value` → (`a.b`, value).
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (key, value) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got \"{s}\"")))?;
    Ok((key.trim().to_string(), parse_value(value.trim())))
}

fn set_path(tree: &mut Value, path: &str, value: Value, origin: &str) -> Result<()> {
    let unknown = || CliError::Invalid(format!("unknown config key \"{path}\" (from {origin})"));
    let mut node = tree;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        let slot = obj.get_mut(part).ok_or_else(unknown)?;
        if parts.peek().is_none() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(unknown())
}

/// Overlays `layer` onto `base` leaf by leaf.
fn merge(base: &mut Value, layer: &Value, prefix: &str, origin: &str) -> Result<()> {
    match layer {
        Value::Object(map) if base.is_object() && !map.is_empty() => {
            for (k, v) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = base
                    .as_object_mut()
                    .and_then(|b| b.get_mut(k))
                    .ok_or_else(|| CliError::Invalid(format!("unknown config key \"{path}\" (from {origin})")))?;
                merge(slot, v, &path, origin)?;
            }
            Ok(())
        }
        other => {
            *base = other.clone();
            Ok(())
        }
    }
}

fn read_config_file(path: &Path) -> Result<Value> {
    let text = read_text(path)?;
    if path.extension().is_some_and(|e| e == "toml") {
        let parsed: toml::Table = toml::from_str(&text).map_err(|e| CliError::parse(path, 0, e))?;
        serde_json::to_value(parsed).map_err(|e| CliError::parse(path, 0, e))
    } else {
        serde_json::from_str(&text).map_err(|e| CliError::parse(path, e.line(), e))
    }
}

/// `CSCR_TRAIN__EPOCHS` → `train.epochs`. The run-root variable is not a setting.
fn env_key(name: &str) -> Option<String> {
    if name == RUN_DIR_ENV {
        return None;
    }
    name.strip_prefix(ENV_PREFIX).map(|rest| rest.to_lowercase().replace("__", "."))
}

#[derive(Debug, Default, Clone)]
pub struct Layers {
    pub file: Option<PathBuf>,
    pub env: Vec<(String, String)>,
    pub flags: Vec<(String, Value)>,
}

impl Layers {
    /// Picks up every `CSCR_*` variable of the current process.
    pub fn with_process_env(mut self) -> Self {
        self.env = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        self.env.sort();
        self
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut tree = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        if let Some(file) = &self.file {
            let layer = read_config_file(file)?;
            merge(&mut tree, &layer, "", &file.display().to_string())?;
        }
        for (name, raw) in &self.env {
            if let Some(path) = env_key(name) {
                set_path(&mut tree, &path, parse_value(raw), name)?;
            }
        }
        for (path, value) in &self.flags {
            set_path(&mut tree, path, value.clone(), "command line")?;
        }
        serde_json::from_value(tree).map_err(|e| CliError::Invalid(format!("invalid configuration: {e}")))
    }
}

/// Everything that determines a run's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunIdentity {
    pub command: String,
    pub config: RunConfig,
    /// Input role → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
}

impl RunIdentity {
    pub fn hash(&self) -> String {
        // Value maps are sorted by key, which makes the serialization canonical.
        let canonical: Value = serde_json::to_value(self).expect("identity serializes");
        sha256_hex(canonical.to_string().as_bytes())
    }
}

/// `<root>/<command>-<first 12 hex digits of the hash>`.
pub fn run_dir(command: &str, hash: &str) -> PathBuf {
    let root = std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT));
    root.join(format!("{command}-{}", &hash[..12]))
}

/// The resolved configuration, its identity and hash as written next to every run.
pub fn echo(identity: &RunIdentity) -> Value {
    let mut map = Map::new();
    map.insert("command".into(), Value::String(identity.command.clone()));
    map.insert("config_hash".into(), Value::String(identity.hash()));
    map.insert("config".into(), serde_json::to_value(&identity.config).expect("config serializes"));
    map.insert("inputs".into(), serde_json::to_value(&identity.inputs).expect("inputs serialize"));
    Value::Object(map)
}
