//! Layered settings: built-in defaults, then the JSON config file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use rtlforge_core::bench::DatasetFormat;
use rtlforge_core::orchestrator::RunConfig;
use rtlforge_core::sim_bridge::ToolchainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SimBackendKind {
    /// Replay or record alongside the LLM backend when a sim cassette is
    /// given, otherwise the real toolchain.
    #[default]
    Auto,
    Icarus,
    Replay,
    Record,
}

/// Everything a command needs after merging.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub backend: BackendKind,
    pub cassette: Option<PathBuf>,
    pub sim_backend: SimBackendKind,
    pub sim_cassette: Option<PathBuf>,
    pub endpoint: String,
    /// Name of the variable holding the API key; the key itself is never
    /// read from or written to files.
    pub auth_env: String,
    pub model: String,
    pub max_parallel: usize,
    pub fanout: bool,
    pub prompts_dir: Option<PathBuf>,
    pub toolchain: ToolchainConfig,
    pub scrub_workdirs: bool,
    pub dataset: Option<PathBuf>,
    pub dataset_format: DatasetFormat,
    pub out: Option<PathBuf>,
    pub runs: u32,
    pub workers: usize,
    pub golden_banner: Option<String>,
    #[serde(skip_deserializing)]
    pub run: RunConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            backend: BackendKind::Live,
            cassette: None,
            sim_backend: SimBackendKind::Auto,
            sim_cassette: None,
            endpoint: "https://api.openai.com/v1".into(),
            auth_env: "OPENAI_API_KEY".into(),
            model: "gpt-4o".into(),
            max_parallel: 8,
            fanout: false,
            prompts_dir: None,
            toolchain: ToolchainConfig::default(),
            scrub_workdirs: false,
            dataset: None,
            dataset_format: DatasetFormat::Jsonl,
            out: None,
            runs: 1,
            workers: 1,
            golden_banner: None,
            run: RunConfig::default(),
        }
    }
}

/// Keys that configure the CLI itself; every other key is a run setting.
const CLI_KEYS: &[&str] = &[
    "backend",
    "cassette",
    "sim_backend",
    "sim_cassette",
    "endpoint",
    "auth_env",
    "model",
    "max_parallel",
    "fanout",
    "prompts_dir",
    "toolchain",
    "scrub_workdirs",
    "dataset",
    "dataset_format",
    "out",
    "runs",
    "workers",
    "golden_banner",
];

const PATH_KEYS: &[&str] = &["cassette", "sim_cassette", "prompts_dir", "dataset", "out"];

fn looks_like_secret(key: &str) -> bool {
    let k = key.to_ascii_lowercase().replace('-', "_");
    ["api_key", "apikey", "secret", "password", "token", "authorization", "bearer"]
        .iter()
        .any(|s| k.contains(s))
}

fn reject_secrets(value: &Value, path: &str) -> Result<()> {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                if looks_like_secret(k) && k != "auth_env" && k != "max_tokens" {
                    bail!(
                        "config key {path}{k} looks like a credential; put the key in the environment variable named by auth_env instead"
                    );
                }
                reject_secrets(v, &format!("{path}{k}."))?;
            }
        }
        Value::Array(items) => {
            for v in items {
                reject_secrets(v, path)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Layers `file` then `flags` over the defaults. Both are JSON objects
/// with RunConfig keys either at the top level or under `run`.
pub fn merge(file: Option<(&Path, Value)>, flags: Map<String, Value>) -> Result<CliConfig> {
    let mut cli = serde_json::to_value(CliConfig::default())?;
    let mut run = serde_json::to_value(RunConfig::default())?;
    let mut layers = Vec::new();
    if let Some((path, value)) = file {
        reject_secrets(&value, "")?;
        let Value::Object(mut map) = value else {
            bail!("{}: config must be a JSON object", path.display());
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for key in PATH_KEYS {
            if let Some(Value::String(p)) = map.get(*key) {
                let resolved = base.join(p);
                map.insert(key.to_string(), Value::String(resolved.display().to_string()));
            }
        }
        layers.push((format!("{}", path.display()), map));
    }
    layers.push(("command line".to_string(), flags));
    for (origin, mut layer) in layers {
        if let Some(nested) = layer.remove("run") {
            let Value::Object(nested) = nested else {
                bail!("{origin}: `run` must be an object");
            };
            overlay(&mut run, nested.into_iter().map(|(k, v)| (canonical_run_key(k), v)).collect());
        }
        let (cli_part, run_part): (Map<String, Value>, Map<String, Value>) =
            layer.into_iter().partition(|(k, _)| CLI_KEYS.contains(&k.as_str()));
        overlay(&mut cli, cli_part);
        overlay(&mut run, run_part.into_iter().map(|(k, v)| (canonical_run_key(k), v)).collect());
    }
    let run: RunConfig = serde_json::from_value(run).context("run settings")?;
    run.validate().map_err(anyhow::Error::msg).context("run settings")?;
    let mut merged: CliConfig = serde_json::from_value(strip_run(cli)).context("settings")?;
    merged.run = run;
    Ok(merged)
}

fn canonical_run_key(key: String) -> String {
    match key.as_str() {
        "c" => "pool_size".into(),
        "K" => "top_k".into(),
        "L_W" => "window_len".into(),
        _ => key,
    }
}

fn overlay(target: &mut Value, layer: Map<String, Value>) {
    let Value::Object(t) = target else { unreachable!("defaults serialise to objects") };
    for (k, v) in layer {
        if !v.is_null() {
            t.insert(k, v);
        }
    }
}

fn strip_run(mut cli: Value) -> Value {
    if let Value::Object(m) = &mut cli {
        m.remove("run");
    }
    cli
}

pub fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))
}
