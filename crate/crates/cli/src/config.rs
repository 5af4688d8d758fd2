//! Layered run configuration: built-in defaults, then a JSON file, then
//! `--key value` pairs from the command line. Every layer is checked
//! against the known keys, so a typo fails instead of being ignored.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Raw layers collected from the command line.
#[derive(Debug, Default)]
pub struct Layers {
    pub file: Option<PathBuf>,
    pub overrides: Map<String, Value>,
}

/// Parses `--key value` pairs. A key followed by another key (or nothing)
/// is a boolean flag. Values are read as JSON when they parse, otherwise as
/// strings, so `--epochs 5`, `--conv_channels [4,8]` and `--mu fixed:0.5`
/// all work. Dashes in keys become underscores.
pub fn parse_layers(args: &[String]) -> Result<Layers> {
    let mut layers = Layers::default();
    let mut i = 0;
    while i < args.len() {
        let Some(key) = args[i].strip_prefix("--") else {
            bail!("expected an option starting with '--', found '{}'", args[i]);
        };
        let (key, inline) = match key.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (key, None),
        };
        let key = key.replace('-', "_");
        if key.is_empty() {
            bail!("empty option name");
        }
        let value = match inline {
            Some(v) => Some(v),
            None if i + 1 < args.len() && !args[i + 1].starts_with("--") => {
                i += 1;
                Some(args[i].clone())
            }
            None => None,
        };
        i += 1;
        if key == "config" {
            let path = value.with_context(|| "--config needs a file path")?;
            layers.file = Some(PathBuf::from(path));
            continue;
        }
        let value = match value {
            None => Value::Bool(true),
            Some(v) => serde_json::from_str(&v).unwrap_or(Value::String(v)),
        };
        if layers.overrides.insert(key.clone(), value).is_some() {
            bail!("option --{key} given twice");
        }
    }
    Ok(layers)
}

fn read_file(path: &Path) -> Result<Map<String, Value>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?
    {
        Value::Object(map) => Ok(map),
        _ => bail!("config {} must hold a JSON object", path.display()),
    }
}

/// A set of configuration keys that deserializes into one struct.
pub struct Section {
    keys: Map<String, Value>,
}

impl Section {
    pub fn of<T: Serialize>(defaults: &T) -> Result<Self> {
        match serde_json::to_value(defaults)? {
            Value::Object(keys) => Ok(Self { keys }),
            _ => bail!("configuration defaults must serialize to an object"),
        }
    }

    pub fn without(mut self, key: &str) -> Self {
        self.keys.remove(key);
        self
    }
}

/// Defaults overlaid with the file and then the command line, split back
/// into one object per section. Keys unknown to every section are errors.
/// `aliases` maps short option names to their canonical key.
pub fn resolve(
    layers: &Layers,
    sections: &mut [Section],
    aliases: &[(&str, &str)],
) -> Result<Vec<Map<String, Value>>> {
    let file = match &layers.file {
        Some(path) => read_file(path)?,
        None => Map::new(),
    };
    for (origin, layer) in [("config file", &file), ("command line", &layers.overrides)] {
        for (key, value) in layer {
            let key = aliases
                .iter()
                .find(|(alias, _)| alias == key)
                .map_or(key.as_str(), |(_, canonical)| canonical);
            let section = sections
                .iter_mut()
                .find(|s| s.keys.contains_key(key))
                .with_context(|| format!("unknown configuration key '{key}' in {origin}"))?;
            section.keys.insert(key.to_string(), value.clone());
        }
    }
    Ok(sections.iter().map(|s| s.keys.clone()).collect())
}

/// Deserializes a resolved section, naming it in the error.
pub fn parse_section<T: DeserializeOwned>(name: &str, map: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(map))
        .with_context(|| format!("invalid {name} configuration"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn values_flags_and_json() {
        let l = parse_layers(&args(&[
            "--epochs",
            "5",
            "--source-only",
            "--mu",
            "fixed:0.5",
            "--conv-channels=[4,8]",
        ]))
        .unwrap();
        assert_eq!(l.overrides["epochs"], Value::from(5));
        assert_eq!(l.overrides["source_only"], Value::Bool(true));
        assert_eq!(l.overrides["mu"], Value::from("fixed:0.5"));
        assert_eq!(l.overrides["conv_channels"], serde_json::json!([4, 8]));
    }

    #[test]
    fn rejects_positional_and_repeated() {
        assert!(parse_layers(&args(&["epochs"])).is_err());
        assert!(parse_layers(&args(&["--a", "1", "--a", "2"])).is_err());
    }

    #[test]
    fn unknown_keys_are_named() {
        #[derive(Serialize)]
        struct D {
            alpha: u32,
        }
        let layers = parse_layers(&args(&["--alpah", "3"])).unwrap();
        let mut sections = [Section::of(&D { alpha: 1 }).unwrap()];
        let err = resolve(&layers, &mut sections, &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("alpah"), "{err}");
    }
}
