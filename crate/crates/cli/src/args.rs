//! `--dotted.key value` overrides and the short aliases.

use std::path::PathBuf;

use anyhow::{bail, Result};
use fvsim_core::config::{Config, ConfigError};

/// Overrides collected from the trailing arguments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub pairs: Vec<(String, String)>,
    /// Root for run directories (`--runs DIR`).
    pub runs: Option<PathBuf>,
}

/// Parses `--key value` and `--key=value` pairs.
pub fn parse_overrides(rest: &[String]) -> Result<Overrides> {
    let mut out = Overrides::default();
    let mut it = rest.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            bail!("unexpected argument '{arg}'; overrides take the form --key value");
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match it.next() {
                Some(v) => (key.to_string(), v.clone()),
                None => bail!("override --{key} is missing its value"),
            },
        };
        if key.is_empty() {
            bail!("empty override key");
        }
        if key == "runs" {
            out.runs = Some(PathBuf::from(value));
        } else {
            out.pairs.push((key, value));
        }
    }
    Ok(out)
}

/// Expands `N` and `seed` against the sections present in `text`: `N` sets
/// `sim.N`; `seed` sets the seed of every section carrying one.
pub fn expand(text: &str, pairs: &[(String, String)]) -> Result<Vec<(String, String)>, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Toml(e.to_string()))?;
    let mut out = Vec::new();
    for (k, v) in pairs {
        match k.as_str() {
            "N" => out.push(("sim.N".to_string(), v.clone())),
            "seed" => {
                let targets: Vec<&str> = ["sim", "reference"].into_iter().filter(|s| table.contains_key(*s)).collect();
                if targets.is_empty() {
                    out.push(("sim.seed".to_string(), v.clone()));
                }
                out.extend(targets.into_iter().map(|s| (format!("{s}.seed"), v.clone())));
            }
            _ => out.push((k.clone(), v.clone())),
        }
    }
    Ok(out)
}

/// Parses `text` with the overrides applied.
pub fn load(text: &str, pairs: &[(String, String)]) -> Result<Config, ConfigError> {
    Config::from_toml_with_overrides(text, &expand(text, pairs)?)
}

/// Keeps only the overrides whose top-level section exists in `text`
/// (aliases always apply). Used when one override list feeds several configs.
pub fn applicable(text: &str, pairs: &[(String, String)]) -> Result<Vec<(String, String)>, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Toml(e.to_string()))?;
    Ok(pairs
        .iter()
        .filter(|(k, _)| {
            let head = k.split('.').next().unwrap_or_default();
            k == "N" || k == "seed" || table.contains_key(head)
        })
        .cloned()
        .collect())
}
