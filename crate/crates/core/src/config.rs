//! Plain-text `key = value` configuration files.
//!
//! Keys are dotted (`adapt.iterations`), values are free text up to the end
//! of the line. `#` starts a comment line. Every section reads the keys it
//! knows with [`KvMap::take`]; anything left over afterwards is a typo and
//! is reported by [`KvMap::finish`].

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Removes `key` and parses it, leaving `slot` untouched when absent.
    pub fn take<T>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *slot = raw
                .parse()
                .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))?;
        }
        Ok(())
    }

    /// Like [`Self::take`] for comma-separated lists.
    pub fn take_list<T>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *slot = raw
                .split(',')
                .map(|item| {
                    item.trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    /// Fails if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(key) => Err(Error::Config(format!("unknown configuration key {key}"))),
            None => Ok(()),
        }
    }

    pub fn extend(&mut self, other: KvMap) {
        self.entries.extend(other.entries);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted `key = value` lines.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Joins a list for [`KvMap::take_list`].
pub fn join_list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// A configuration section that round-trips through a [`KvMap`].
pub trait KvSection: Sized + Default {
    fn write_kv(&self, prefix: &str, out: &mut KvMap);

    /// Overrides `self` with whatever `prefix.*` keys are present.
    fn take_kv(&mut self, prefix: &str, kv: &mut KvMap) -> Result<()>;

    fn from_kv(prefix: &str, kv: &mut KvMap) -> Result<Self> {
        let mut section = Self::default();
        section.take_kv(prefix, kv)?;
        Ok(section)
    }
}
