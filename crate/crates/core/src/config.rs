//! Plain `key=value` configuration text.
//!
//! One entry per line, `#` starts a comment. Typed getters remove the keys
//! they read, so whatever is left after every consumer has run is unknown.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{LmError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<KvConfig> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| LmError::Parse {
                source_name: "config".into(),
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(LmError::Parse {
                    source_name: "config".into(),
                    line: i + 1,
                    message: format!("key {k:?} given twice"),
                });
            }
        }
        Ok(KvConfig { entries })
    }

    /// Later values win.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| LmError::Config(format!("bad value {v:?} for {key}"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_required<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?
            .ok_or_else(|| LmError::Config(format!("missing required key {key}")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Errors on any key nobody consumed.
    pub fn finish(&self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(_) => Err(LmError::Config(format!(
                "unknown config key(s): {}",
                self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

/// Builds canonical text from `(key, value)` pairs in the given order.
pub fn kv_text(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    s
}
