//! TOML run configuration. Every key is optional; command-line flags win.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

use nl2sql_po::OptimizationConfig;

use crate::UsageError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub db_root: Option<PathBuf>,
    pub backend: Option<String>,
    pub cache: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub proposer_model: Option<String>,
    pub rpm: Option<u32>,
    pub workers: Option<usize>,
    pub timeout: Option<f64>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub optimization: Option<OptimizationConfig>,
}

fn credential_key(table: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in table {
        let lower = k.to_ascii_lowercase();
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if lower.contains("api_key")
            || lower.contains("apikey")
            || lower == "token"
            || lower == "secret"
        {
            return Some(path);
        }
        if let toml::Value::Table(inner) = v {
            if let Some(found) = credential_key(inner, &path) {
                return Some(found);
            }
        }
    }
    None
}

impl FileConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let raw: toml::Table = text
            .parse()
            .map_err(|e| UsageError(format!("config is not valid TOML: {e}")))?;
        if let Some(key) = credential_key(&raw, "") {
            return Err(UsageError(format!(
                "config key `{key}` looks like a credential; API keys are read only from {}",
                nl2sql_po::llmclient::API_KEY_ENV
            ))
            .into());
        }
        raw.try_into::<FileConfig>()
            .map_err(|e| UsageError(format!("invalid config: {e}")).into())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))
            .with_context(|| format!("loading {}", path.display()))?;
        Self::parse(&text)
    }
}
