//! JSON config files as a fallback for command-line flags.

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub fn load(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if !v.is_object() {
        bail!("config {} must hold a JSON object", path.display());
    }
    Ok(v)
}

fn key(k: &str) -> String {
    k.replace('-', "_")
}

const SECTIONS: [&str; 7] = ["phantom-gen", "dataset-folds", "train", "eval", "serve", "replay", "bench"];

/// Fills every flag left unset on the command line from the config: first
/// from the subcommand's section, then from top-level keys. Unknown keys in
/// the section are an error; unknown top-level keys are left for other
/// subcommands.
pub fn merge<T: Serialize + DeserializeOwned>(args: T, file: Option<&Value>, section: &str) -> Result<T> {
    let Some(file) = file.and_then(Value::as_object) else {
        return Ok(args);
    };
    let mut merged = match serde_json::to_value(&args)? {
        Value::Object(m) => m,
        _ => unreachable!("argument structs serialise to objects"),
    };
    let fill = |merged: &mut Map<String, Value>, source: &Map<String, Value>, strict: bool| -> Result<()> {
        for (k, v) in source {
            let k = key(k);
            match merged.get_mut(&k) {
                Some(slot) if slot.is_null() => *slot = v.clone(),
                Some(_) => {}
                None if strict => bail!("unknown key {k:?} in config section {section:?}"),
                None => {}
            }
        }
        Ok(())
    };
    let own = file
        .iter()
        .find(|(k, _)| key(k) == key(section))
        .map(|(_, v)| v.as_object().ok_or_else(|| anyhow!("config section {section:?} must be an object")))
        .transpose()?;
    if let Some(own) = own {
        fill(&mut merged, own, true)?;
    }
    let top: Map<String, Value> = file
        .iter()
        .filter(|(k, _)| !SECTIONS.iter().any(|s| key(s) == key(k)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    fill(&mut merged, &top, false)?;
    serde_json::from_value(Value::Object(merged)).context("config value has the wrong type")
}

pub fn need<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| anyhow!("{flag} is required (on the command line or in --config)"))
}

/// Quality grade shares, written `0.1,0.2,0.3,0.4` or as a JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "MixRepr", into = "Vec<f64>")]
pub struct QualityMix(Vec<f64>);

#[derive(Deserialize)]
#[serde(untagged)]
enum MixRepr {
    List(Vec<f64>),
    Text(String),
}

impl From<MixRepr> for QualityMix {
    fn from(r: MixRepr) -> Self {
        match r {
            MixRepr::List(v) => QualityMix(v),
            // unparsable text becomes an empty mix, rejected by `shares`
            MixRepr::Text(s) => s.parse().unwrap_or(QualityMix(Vec::new())),
        }
    }
}

impl From<QualityMix> for Vec<f64> {
    fn from(m: QualityMix) -> Self {
        m.0
    }
}

impl FromStr for QualityMix {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(QualityMix)
    }
}

impl QualityMix {
    pub fn shares(&self) -> Result<[f64; 4]> {
        <[f64; 4]>::try_from(self.0.as_slice())
            .map_err(|_| anyhow!("quality mix needs four shares, got {:?}", self.0))
    }
}
