//! Flat `key = value` experiment files.
//!
//! ```text
//! # toy run
//! router = sam_shared
//! k = 2
//! lr = 0.003   # trailing comments are fine
//! ```
//!
//! Keys are the [`ExperimentConfig`] field names. Missing keys take their
//! defaults, except `input_dim`, which follows `d_model` when absent.

use std::collections::HashMap;
use std::path::Path;

use sam_core::harness::ExperimentConfig;

use crate::CliError;

/// Parses config text. Errors name the offending line and key.
pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "line {line_no}: expected `key = value`, got {line:?}"
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(CliError::Config(format!("line {line_no}: missing key")));
        }
        if let Some(prev) = seen.insert(key.to_string(), line_no) {
            return Err(CliError::Config(format!(
                "line {line_no}: {key}: already set on line {prev}"
            )));
        }
        cfg.set(key, value)
            .map_err(|e| CliError::Config(format!("line {line_no}: {key}: {e}")))?;
    }
    if !seen.contains_key("input_dim") {
        cfg.input_dim = cfg.d_model;
    }
    Ok(cfg)
}

/// Writes every field, one `key = value` line each, in a fixed order.
pub fn serialize(cfg: &ExperimentConfig) -> String {
    cfg.entries()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// Reads, parses and validates a config file, then applies a seed override.
pub fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg =
        parse(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}
