//! Flags and JSON config share one key space: every flag is serialized under
//! its camelCase key and laid over the config file.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use mfa_core::ChannelStructure;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Common {
    /// Channel sizes, e.g. 8,8,8.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<usize>>,
    /// Number of common factors.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r0: Option<usize>,
    /// Distinct factors per channel, e.g. 2,2,2.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distinct: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// JSON file with defaults for any flag (camelCase keys).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output path; stdout when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
}

impl Common {
    pub fn structure(&self) -> Result<ChannelStructure, CliError> {
        let channels = self.channels.clone().ok_or_else(|| CliError::usage("missing --channels"))?;
        let r0 = self.r0.ok_or_else(|| CliError::usage("missing --r0"))?;
        let distinct = self.distinct.clone().ok_or_else(|| CliError::usage("missing --distinct"))?;
        ChannelStructure::new(channels, r0, distinct).map_err(|e| CliError::usage(e.to_string()))
    }

    pub fn format_or(&self, default: Format) -> Format {
        self.format.unwrap_or(default)
    }
}

/// Overlays the flags of `args` on the config file named by `config` and
/// reads the merged settings back as `T`.
pub fn resolve<T>(args: &T, config: Option<&Path>) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned,
{
    let mut merged = match config {
        Some(p) => load_config(p)?,
        None => Map::new(),
    };
    let flags = serde_json::to_value(args).map_err(|e| CliError::internal(e.to_string()))?;
    if let Value::Object(m) = flags {
        merged.extend(m);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::usage(format!("bad configuration: {}", e)))
}

fn load_config(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {}", path.display(), e)))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("malformed config {}: {}", path.display(), e)))?;
    let Value::Object(mut map) = value else {
        return Err(CliError::usage(format!("config {} must be a JSON object", path.display())));
    };
    // A nested structure object supplies channels, r0 and distinct.
    if let Some(Value::Object(s)) = map.remove("structure") {
        for (k, v) in s {
            map.entry(k).or_insert(v);
        }
    }
    Ok(map)
}
