//! Flat `key = value` configuration files. Every knob maps to one documented
//! key; keys that no consumer reads are hard errors, so typos in experiment
//! configs fail loudly instead of silently using defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("duplicate config key `{0}`")]
    Duplicate(String),
    #[error("missing required config key `{0}`")]
    Missing(String),
    #[error("config key `{key}`: cannot parse `{value}`: {msg}")]
    BadValue {
        key: String,
        value: String,
        msg: String,
    },
    #[error("unknown config key(s): {0}")]
    UnknownKeys(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

/// A parsed flat config. Lookups mark keys as consumed; [`FlatConfig::finish`]
/// rejects any key nothing consumed.
#[derive(Debug)]
pub struct FlatConfig {
    map: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
    text: String,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
            {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    msg: format!("invalid key `{key}`"),
                });
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ConfigError::Duplicate(key.to_string()));
            }
        }
        Ok(Self {
            map,
            used: RefCell::new(BTreeSet::new()),
            text: text.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Verbatim text of the loaded config (for reproducibility records).
    pub fn text(&self) -> &str {
        &self.text
    }

    /// Raw string value, if present. Marks the key consumed.
    pub fn get_str(&self, key: &str) -> Option<String> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    /// Parsed optional value.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                value: v,
                msg: e.to_string(),
            }),
        }
    }

    /// Parsed value with a default.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Parsed required value.
    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// Error if the config contains keys that no consumer read.
    pub fn finish(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .map
            .keys()
            .filter(|k| !used.contains(*k))
            .map(|k| k.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::UnknownKeys(unknown.join(", ")))
        }
    }
}
