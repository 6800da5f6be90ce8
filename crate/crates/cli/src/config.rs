//! Effective configuration: a JSON file overlaid with command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// `HxW` extents, e.g. `32x32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims(pub usize, pub usize);

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
        Ok(Dims(parse(a)?, parse(b)?))
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

/// `A,B` pair of reals, e.g. a `dy,dx` shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair(pub f64, pub f64);

impl FromStr for Pair {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once(',').ok_or_else(|| format!("expected A,B, got `{s}`"))?;
        let parse = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}"));
        Ok(Pair(parse(a)?, parse(b)?))
    }
}

fn strip_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, strip_nulls(v)))
                .filter(|(_, v)| !matches!(v, Value::Object(m) if m.is_empty()))
                .collect(),
        ),
        other => other,
    }
}

fn merge(base: &mut Map<String, Value>, over: Map<String, Value>) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Object(b)), Value::Object(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Reads `file` (if any), overlays every flag that was given and
/// deserialises the result; missing keys take the config type's defaults.
pub fn effective<C: DeserializeOwned>(file: Option<&Path>, flags: &impl Serialize) -> Result<C> {
    let mut base = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
            match serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))? {
                Value::Object(m) => m,
                _ => bail!("{}: config must be a JSON object", path.display()),
            }
        }
        None => Map::new(),
    };
    if let Value::Object(over) = strip_nulls(serde_json::to_value(flags)?) {
        merge(&mut base, over);
    }
    let from = file.map_or_else(|| "flags".to_string(), |p| p.display().to_string());
    serde_json::from_value(Value::Object(base)).map_err(|e| anyhow!("{from}: invalid config: {e}"))
}

/// A path setting that has no default.
pub fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| anyhow!("missing required setting `{key}` (flag --{} or config key)", key.replace('_', "-")))
}
