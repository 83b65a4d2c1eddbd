//! TOML run configuration and flattened `key=value` echoes of it.

use std::path::Path;

use serde::Serialize;

use crate::error::{KerlError, Result};
use crate::trainer::TrainConfig;

/// Reads a training config; missing keys keep their defaults, unknown keys are errors.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| KerlError::io(path, e))?;
    parse_train_config(&text, path)
}

pub fn parse_train_config(text: &str, origin: &Path) -> Result<TrainConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| toml_error(origin, text, &e))?;
    check_keys(&table, &toml::Table::try_from(TrainConfig::default()).expect("config serializes"), "", origin, text)?;
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| toml_error(origin, text, &e))?;
    cfg.validate()?;
    Ok(cfg)
}

fn toml_error(origin: &Path, text: &str, e: &toml::de::Error) -> KerlError {
    let line = e.span().map_or(0, |s| text[..s.start].lines().count().max(1));
    KerlError::parse(origin, line, e.message().to_string())
}

// Optional keys absent from the defaults (e.g. `fusion.hidden`) are allowed.
const OPTIONAL: &[&str] = &["model.fusion.hidden"];

fn check_keys(given: &toml::Table, known: &toml::Table, prefix: &str, origin: &Path, text: &str) -> Result<()> {
    for (k, v) in given {
        let full = format!("{prefix}{k}");
        match (v, known.get(k)) {
            (toml::Value::Table(sub), Some(toml::Value::Table(ksub))) => check_keys(sub, ksub, &format!("{full}."), origin, text)?,
            (_, Some(_)) => {}
            (_, None) if OPTIONAL.contains(&full.as_str()) => {}
            _ => return Err(KerlError::parse(origin, key_line(text, &full), format!("unknown key {full}"))),
        }
    }
    Ok(())
}

/// 1-based line defining the dotted key `full`, either as a table header or
/// as an assignment inside one; 0 when not found.
fn key_line(text: &str, full: &str) -> usize {
    let mut section = String::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        let key = if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = header.trim().to_string();
            section.clone()
        } else if let Some((k, _)) = line.split_once('=') {
            let k = k.trim();
            if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            }
        } else {
            continue;
        };
        if key == full {
            return i + 1;
        }
    }
    0
}

/// Dotted `key=value` pairs for every scalar in `value`, sorted by key.
pub fn flatten<T: Serialize>(value: &T) -> Vec<(String, String)> {
    let mut out = Vec::new();
    if let Ok(table) = toml::Table::try_from(value) {
        walk(&table, "", &mut out);
    }
    out.sort();
    out
}

fn walk(table: &toml::Table, prefix: &str, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = format!("{prefix}{k}");
        match v {
            toml::Value::Table(t) => walk(t, &format!("{key}."), out),
            toml::Value::String(s) => out.push((key, s.clone())),
            other => out.push((key, other.to_string())),
        }
    }
}
