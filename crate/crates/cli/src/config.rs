//! Flat `key = value` configuration with command-line overrides.
//!
//! A config file is a sequence of lines: blank lines and `#` comments are
//! skipped, everything else must be `key = value`. Keys are validated
//! against the command's schema; unknown keys are rejected rather than
//! ignored, so a typo cannot silently fall back to a default. `--set`
//! overrides go through the same validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use citrus_core::{CitrusError, Result};

/// Key/value pairs as read, before schema resolution.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: Vec<(String, String)>,
    /// Directory of the source file; relative path values resolve against
    /// it.
    base_dir: PathBuf,
}

impl RawConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let stripped = line.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or(CitrusError::Parse {
                line: lineno,
                msg: format!("expected `key = value`, got {stripped:?}"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CitrusError::Parse { line: lineno, msg: "empty key".into() });
            }
            entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(RawConfig { entries, base_dir: base_dir.to_path_buf() })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &base)
    }

    /// Apply `key=value` overrides (later entries win over the file).
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (key, value) = s.split_once('=').ok_or_else(|| {
                CitrusError::InvalidArgument(format!("--set expects key=value, got {s:?}"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CitrusError::InvalidArgument(format!("--set has an empty key: {s:?}")));
            }
            self.entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(())
    }
}

/// One allowed key: required when `default` is `None`.
#[derive(Clone, Debug)]
pub struct SchemaKey {
    pub name: &'static str,
    pub default: Option<&'static str>,
}

/// The set of keys a command accepts.
#[derive(Clone, Debug)]
pub struct Schema {
    pub command: &'static str,
    pub keys: Vec<SchemaKey>,
}

impl Schema {
    pub fn new(command: &'static str, keys: &[(&'static str, Option<&'static str>)]) -> Self {
        Schema {
            command,
            keys: keys.iter().map(|&(name, default)| SchemaKey { name, default }).collect(),
        }
    }

    /// Validate raw entries against this schema and fill defaults.
    pub fn resolve(&self, raw: &RawConfig) -> Result<Config> {
        let mut values: BTreeMap<String, String> = BTreeMap::new();
        for (k, v) in &raw.entries {
            if !self.keys.iter().any(|sk| sk.name == k) {
                return Err(CitrusError::InvalidArgument(format!(
                    "unknown key {k:?} for command {:?}",
                    self.command
                )));
            }
            values.insert(k.clone(), v.clone());
        }
        for sk in &self.keys {
            if !values.contains_key(sk.name) {
                match sk.default {
                    Some(d) => {
                        values.insert(sk.name.to_string(), d.to_string());
                    }
                    None => {
                        return Err(CitrusError::InvalidArgument(format!(
                            "missing required key {:?} for command {:?}",
                            sk.name, self.command
                        )))
                    }
                }
            }
        }
        Ok(Config { values, base_dir: raw.base_dir.clone() })
    }
}

/// Resolved configuration: every schema key present exactly once.
#[derive(Clone, Debug)]
pub struct Config {
    values: BTreeMap<String, String>,
    base_dir: PathBuf,
}

impl Config {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CitrusError::InvalidArgument(format!("key {key:?} is not in the schema")))
    }

    fn parse_scalar<V: std::str::FromStr>(&self, key: &str, what: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse::<V>().map_err(|_| {
            CitrusError::InvalidArgument(format!("key {key:?}: {raw:?} is not {what}"))
        })
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse_scalar(key, "a nonnegative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse_scalar(key, "a nonnegative integer")
    }

    /// Finite float.
    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse_scalar(key, "a number")?;
        if !v.is_finite() {
            return Err(CitrusError::InvalidArgument(format!(
                "key {key:?} must be finite, got {v}"
            )));
        }
        Ok(v)
    }

    /// Float where `inf` is meaningful (SNR grids).
    pub fn f64_or_inf(&self, key: &str) -> Result<f64> {
        parse_f64_or_inf(self.get(key)?)
            .ok_or_else(|| CitrusError::InvalidArgument(format!("key {key:?} is not a number")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CitrusError::InvalidArgument(format!(
                "key {key:?}: {other:?} is not a boolean"
            ))),
        }
    }

    /// Comma-separated list of finite floats.
    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let out = self.f64_or_inf_list(key)?;
        if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
            return Err(CitrusError::InvalidArgument(format!(
                "key {key:?} must be finite, got {bad}"
            )));
        }
        Ok(out)
    }

    /// Comma-separated floats where `inf` entries are allowed.
    pub fn f64_or_inf_list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.get(key)?;
        raw.split(',')
            .map(|tok| {
                parse_f64_or_inf(tok.trim()).ok_or_else(|| {
                    CitrusError::InvalidArgument(format!(
                        "key {key:?}: {tok:?} is not a number"
                    ))
                })
            })
            .collect()
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.get(key)?;
        raw.split(',')
            .map(|tok| {
                tok.trim().parse::<usize>().map_err(|_| {
                    CitrusError::InvalidArgument(format!(
                        "key {key:?}: {tok:?} is not a nonnegative integer"
                    ))
                })
            })
            .collect()
    }

    pub fn u64_list(&self, key: &str) -> Result<Vec<u64>> {
        let raw = self.get(key)?;
        raw.split(',')
            .map(|tok| {
                tok.trim().parse::<u64>().map_err(|_| {
                    CitrusError::InvalidArgument(format!(
                        "key {key:?}: {tok:?} is not a nonnegative integer"
                    ))
                })
            })
            .collect()
    }

    /// File path value resolved against the config file's directory.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        let raw = self.get(key)?;
        if raw.is_empty() {
            return Err(CitrusError::InvalidArgument(format!("key {key:?} is an empty path")));
        }
        let p = Path::new(raw);
        Ok(if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) })
    }

    /// Whether an optional-path key is set to something non-empty.
    pub fn is_set(&self, key: &str) -> bool {
        self.values.get(key).map_or(false, |v| !v.is_empty())
    }

    /// Sorted `(key, value)` view for the report echo.
    pub fn echo(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

fn parse_f64_or_inf(tok: &str) -> Option<f64> {
    match tok {
        "inf" | "+inf" | "infinity" => Some(f64::INFINITY),
        "-inf" | "-infinity" => Some(f64::NEG_INFINITY),
        other => other.parse::<f64>().ok().filter(|v| !v.is_nan()),
    }
}
