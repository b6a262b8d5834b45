//! Line-oriented `key = value` files.
//!
//! Used for dataset manifests, resolved run-config snapshots, volume sidecars,
//! and saliency headers. The format is deliberately small: one `key = value`
//! per line, `#` starts a comment, blank lines are ignored, later duplicates
//! win on lookup. Entries keep insertion order so files diff cleanly.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    /// Parses a required key, naming the key in the error.
    pub fn require_parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`")))
    }

    /// Parses an optional key, naming the key in the error.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let text = "a = 1\n# comment\nname = desk run\nratio = 0.7 # trailing\n";
        let kv = KvFile::parse(text).unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("name"), Some("desk run"));
        assert_eq!(kv.get("ratio"), Some("0.7"));
        let rendered = kv.render();
        assert_eq!(KvFile::parse(&rendered).unwrap(), kv);
    }

    #[test]
    fn later_duplicate_wins() {
        let kv = KvFile::parse("a = 1\na = 2\n").unwrap();
        assert_eq!(kv.get("a"), Some("2"));
    }

    #[test]
    fn float_values_round_trip_exactly() {
        let mut kv = KvFile::new();
        let x = 0.1f64 + 0.7f64;
        kv.set("x", x);
        let kv2 = KvFile::parse(&kv.render()).unwrap();
        let y: f64 = kv2.require_parsed("x").unwrap();
        assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn missing_equals_is_an_error() {
        assert!(KvFile::parse("just words\n").is_err());
    }
}
