//! Flat key-value config format: one `key = value` per line, `#` comments,
//! dotted prefixes for grouping (e.g. `dr.mass_frac`).
//!
//! Values round-trip through f64 Display formatting, so writing and
//! re-reading a config is lossless.

use crate::error::CoreError;
use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;

/// An ordered key-value map with insertion-order serialization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
    header: Option<String>,
}

impl KvMap {
    pub fn new() -> Self {
        KvMap::default()
    }

    /// Parse the text form. Duplicate keys and malformed lines are errors.
    pub fn parse(text: &str) -> Result<Self, CoreError> {
        let mut map = KvMap::new();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!("line {}: expected `key = value`: {raw:?}", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(CoreError::Config(format!("line {}: empty key", lineno + 1)));
            }
            if !seen.insert(key.clone()) {
                return Err(CoreError::Config(format!(
                    "line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
            map.entries.push((key, value));
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CoreError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Render to the text form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(h) = &self.header {
            for line in h.lines() {
                out.push_str("# ");
                out.push_str(line);
                out.push('\n');
            }
        }
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// Comment lines emitted at the top of the file.
    pub fn set_header(&mut self, header: impl Into<String>) {
        self.header = Some(header.into());
    }

    /// Insert or overwrite a key.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        if let Some(slot) = self.entries.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.entries.push((key.to_string(), value));
        }
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        let pos = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(pos).1)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _)| k == key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str, v: &str, ty: &str) -> Result<T, CoreError> {
        v.parse().map_err(|_| {
            CoreError::Config(format!("key {key:?}: cannot parse {v:?} as {ty}"))
        })
    }

    pub fn f64(&self, key: &str) -> Result<f64, CoreError> {
        let v = self
            .get(key)
            .ok_or_else(|| CoreError::Config(format!("missing key {key:?}")))?;
        self.parse_value(key, v, "a number")
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, CoreError> {
        match self.get(key) {
            Some(v) => self.parse_value(key, v, "a number"),
            None => Ok(default),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, CoreError> {
        match self.get(key) {
            Some(v) => self.parse_value(key, v, "an integer"),
            None => Ok(default),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, CoreError> {
        match self.get(key) {
            Some(v) => self.parse_value(key, v, "an integer"),
            None => Ok(default),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, CoreError> {
        match self.get(key) {
            Some(v) => self.parse_value(key, v, "a bool (true/false)"),
            None => Ok(default),
        }
    }

    pub fn string_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    /// Reject any key not in `known`. This makes typos in config files hard
    /// errors instead of silently ignored defaults.
    pub fn ensure_known(&self, known: &[&str]) -> Result<(), CoreError> {
        for (k, _) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(CoreError::Config(format!("unknown key {k:?}")));
            }
        }
        Ok(())
    }

    /// Overlay `other` on top of self (other wins on conflicts).
    pub fn merge_from(&mut self, other: &KvMap) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }
}
