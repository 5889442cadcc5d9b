//! Config resolution: defaults, then the JSON file, then `--set` overrides,
//! then dedicated flags.

use std::fs;
use std::path::{Path, PathBuf};

use imfuse::config::RunConfig;
use imfuse::{Error, Result};
use serde_json::Value;

use crate::Cli;
use crate::OUT_ENV;

pub const DEFAULT_OUT: &str = "imfuse-out";

/// Sets `key` (dotted path) in a JSON object tree. The value is parsed as
/// JSON when possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::config(format!("override {spec:?} is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(format!("override {spec:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let map = node.as_object_mut().ok_or_else(|| Error::config(format!("override {key}: {part} is not a section")))?;
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let map = node.as_object_mut().ok_or_else(|| Error::config(format!("override {key}: parent is not a section")))?;
    map.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses a config from JSON text after applying overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
    if !value.is_object() {
        return Err(Error::config("config must be a JSON object"));
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))
}

/// The effective config of a command line before command-specific flags.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(path) => fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        None => "{}".to_string(),
    };
    let mut config = parse_config(&text, &cli.set)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output = Some(out.clone());
    }
    if let Some(d) = &cli.dataset {
        config.dataset = Some(d.clone());
    }
    Ok(config)
}

/// Output root: the config (or `--out`), then the environment, then a
/// fixed default relative to the working directory.
pub fn output_root(config: &RunConfig) -> PathBuf {
    config
        .output
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

pub fn dataset_dir(config: &RunConfig, out: &Path) -> PathBuf {
    config.dataset.clone().unwrap_or_else(|| out.join("dataset"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse() {
        let c = parse_config("{}", &["pretrain.epochs=7".into(), "downstream.mode=partial-finetune".into(), "seed=3".into()]).unwrap();
        assert_eq!(c.pretrain.epochs, 7);
        assert_eq!(c.seed, 3);
        assert_eq!(c.downstream.mode, imfuse::config::TrainMode::PartialFinetune);
    }

    #[test]
    fn overrides_beat_the_file() {
        let c = parse_config(r#"{"pretrain": {"epochs": 2, "alpha": 0.5}}"#, &["pretrain.epochs=9".into()]).unwrap();
        assert_eq!(c.pretrain.epochs, 9);
        assert_eq!(c.pretrain.alpha, 0.5);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        assert!(matches!(parse_config("{}", &["nonsense".into()]), Err(Error::Config(_))));
        assert!(matches!(parse_config("{}", &["model.depth=3".into()]), Err(Error::Config(_))));
        assert!(matches!(parse_config("{}", &["seed.x=1".into()]), Err(Error::Config(_))));
        assert!(matches!(parse_config("[1]", &[]), Err(Error::Config(_))));
    }
}
