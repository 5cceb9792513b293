//! Config plumbing shared by the subcommands: JSON config files with
//! `--set` overrides, the `SFL_SEED` environment override, and CSV writing.

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::path::Path;

/// Builds a config of type `T` from an optional JSON file, a set of
/// field-level overrides from CLI flags, and `--set key=value` pairs.
///
/// The precedence is file < typed flags < `--set` < `SFL_SEED`. Unknown
/// keys are rejected by the target type's `deny_unknown_fields`.
pub fn build_config<T, B>(
    file: Option<&Path>,
    base: B,
    flag_overrides: impl FnOnce(&mut serde_json::Value) -> Result<()>,
    sets: &[String],
) -> Result<T>
where
    T: DeserializeOwned,
    B: Serialize,
{
    let mut value = serde_json::to_value(base).expect("base config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let from_file: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let file_obj = from_file
            .as_object()
            .with_context(|| format!("config {} must be a JSON object", path.display()))?;
        let obj = value.as_object_mut().expect("base config is an object");
        for (k, v) in file_obj {
            obj.insert(k.clone(), v.clone());
        }
    }
    flag_overrides(&mut value)?;
    apply_sets(&mut value, sets)?;
    let cfg: T = serde_json::from_value(value).context("invalid configuration")?;
    Ok(cfg)
}

/// Applies `key=value` pairs onto a JSON object; values parse as JSON
/// scalars first and fall back to strings.
pub fn apply_sets(value: &mut serde_json::Value, sets: &[String]) -> Result<()> {
    let obj = value
        .as_object_mut()
        .context("config root must be a JSON object")?;
    for pair in sets {
        let Some((key, raw)) = pair.split_once('=') else {
            bail!("--set expects KEY=VALUE, got '{pair}'");
        };
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        obj.insert(key.to_string(), parsed);
    }
    Ok(())
}

/// Sets a key in a JSON object when the flag was given.
pub fn set_if<T: Serialize>(value: &mut serde_json::Value, key: &str, flag: &Option<T>) {
    if let Some(v) = flag {
        value[key] = serde_json::to_value(v).expect("flag serializes");
    }
}

/// `SFL_SEED`, when set, wins over every other seed source.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var("SFL_SEED") {
        Ok(text) => {
            let seed = text
                .parse::<u64>()
                .with_context(|| format!("SFL_SEED must be an unsigned integer, got '{text}'"))?;
            Ok(Some(seed))
        }
        Err(_) => Ok(None),
    }
}

/// Parses a comma-separated list with a per-item parser.
pub fn parse_list<T>(text: &str, what: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<&str> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        bail!("{what} list is empty");
    }
    items.into_iter().map(|s| parse(s)).collect()
}

/// Minimal CSV writer: fields are joined with commas, rows with newlines.
/// Every value this lab writes is numeric or a bare identifier, so no
/// quoting is needed.
pub struct CsvWriter {
    buf: String,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        Self {
            buf: header.join(",") + "\n",
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }

    pub fn write(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.finish())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Formats an optional shape parameter for a CSV cell.
pub fn opt_cell(values: &[f64], index: usize) -> String {
    values.get(index).map(|v| v.to_string()).unwrap_or_default()
}
