//! Flat `key = value` configuration layered over built-in defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value as Json;

use crate::UsageError;

/// Dotted key and its TOML value.
pub type Override = (String, toml::Value);

fn flatten_toml(prefix: &str, table: &toml::Table, out: &mut Vec<Override>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten_toml(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

pub fn read_file(path: &Path) -> anyhow::Result<Vec<Override>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
    let mut out = Vec::new();
    flatten_toml("", &table, &mut out);
    Ok(out)
}

/// `key=value`; the value is read as a TOML literal and falls back to a
/// bare string.
pub fn parse_set(s: &str) -> anyhow::Result<Override> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| UsageError(format!("`{s}` is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(UsageError(format!("`{s}` has an empty key")).into());
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", v.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.trim().to_string()));
    Ok((k.to_string(), value))
}

fn set_path(root: &mut Json, key: &str, value: Json) -> Result<(), UsageError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| UsageError(format!("`{key}`: `{}` has no fields", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| UsageError(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

/// Applies `overrides` in order on top of `base`.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, overrides: &[Override]) -> anyhow::Result<T> {
    let mut doc = serde_json::to_value(base)?;
    for (k, v) in overrides {
        let json = serde_json::to_value(v)?;
        set_path(&mut doc, k, json)?;
    }
    serde_json::from_value(doc).map_err(|e| UsageError(format!("config does not fit: {e}")).into())
}

fn flatten_json(prefix: &str, v: &Json, out: &mut Vec<(String, Json)>) {
    match v {
        Json::Object(map) if !map.is_empty() => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, x, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn json_to_toml(v: &Json) -> anyhow::Result<toml::Value> {
    Ok(match v {
        Json::Bool(b) => toml::Value::Boolean(*b),
        Json::Number(n) => match n.as_i64() {
            Some(i) => toml::Value::Integer(i),
            None => toml::Value::Float(n.as_f64().ok_or_else(|| anyhow::anyhow!("number {n} out of range"))?),
        },
        Json::String(s) => toml::Value::String(s.clone()),
        Json::Array(a) => toml::Value::Array(a.iter().map(json_to_toml).collect::<anyhow::Result<_>>()?),
        Json::Object(map) => toml::Value::Table(
            map.iter()
                .map(|(k, x)| Ok((k.clone(), json_to_toml(x)?)))
                .collect::<anyhow::Result<_>>()?,
        ),
        Json::Null => anyhow::bail!("config snapshot cannot hold null values"),
    })
}

/// One `key = value` line per leaf, readable back through `--config`.
pub fn snapshot<T: Serialize>(seed: u64, config: &T) -> anyhow::Result<String> {
    let mut flat = Vec::new();
    flatten_json("", &serde_json::to_value(config)?, &mut flat);
    let mut text = format!("seed = {seed}\n");
    for (k, v) in flat {
        if k.is_empty() {
            continue;
        }
        text.push_str(&format!("{} = {}\n", quote_key(&k), json_to_toml(&v)?));
    }
    Ok(text)
}

fn quote_key(k: &str) -> String {
    k.split('.')
        .map(|p| {
            if p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                p.to_string()
            } else {
                format!("\"{p}\"")
            }
        })
        .collect::<Vec<_>>()
        .join(".")
}
