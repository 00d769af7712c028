//! Flat, typed `key = value` configuration text.
//!
//! ```text
//! # comment
//! model = unet
//! unet.depth = 3
//! train.lr = 0.001
//! ```
//!
//! Keys are lowercase ASCII letters, digits, `_` and `.`; values run to the
//! end of the line (trailing `# ...` comments are stripped). Duplicate keys
//! are rejected, and [`KvReader::finish`] rejects keys nobody asked for.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, FormatError, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'.')
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> std::result::Result<Self, FormatError> {
        let mut cfg = KvConfig::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| FormatError::Text { line: line_no, message };
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                return Err(err(format!("invalid key `{k}`")));
            }
            if cfg.get(k).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
            cfg.entries.push((k.to_string(), v.to_string()));
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Insert or replace, keeping first-insertion order.
    pub fn set(&mut self, key: &str, value: impl Display) {
        assert!(valid_key(key), "invalid config key `{key}`");
        let value = value.to_string();
        assert!(!value.contains('\n') && !value.contains('#'), "config value for `{key}` not representable");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn extend(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Entries whose key starts with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvConfig {
        let p = format!("{prefix}.");
        KvConfig {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|k| (k.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Runs `f` over a reader and then rejects any key it did not consume.
    pub fn read<V>(&self, f: impl FnOnce(&KvReader<'_>) -> Result<V>) -> Result<V> {
        let r = self.reader();
        let v = f(&r)?;
        r.finish()?;
        Ok(v)
    }

    pub fn reader(&self) -> KvReader<'_> {
        KvReader {
            cfg: self,
            used: RefCell::new(BTreeSet::new()),
        }
    }
}

/// Typed access that remembers which keys were consumed.
pub struct KvReader<'a> {
    cfg: &'a KvConfig,
    used: RefCell<BTreeSet<String>>,
}

impl KvReader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.cfg.get(key)
    }

    pub fn parse_or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn required<V: FromStr>(&self, key: &str) -> Result<V> {
        let v = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
        v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
    }

    pub fn string_or(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    /// Comma-separated list.
    pub fn list_or<V: FromStr + Clone>(&self, key: &str, default: &[V]) -> Result<Vec<V>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<Vec<V>, _>>()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse list `{v}`"))),
        }
    }

    /// Errors on the first key that was never read.
    pub fn finish(self) -> Result<()> {
        let used = self.used.into_inner();
        match self.cfg.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(Error::Config(format!("unknown configuration key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Comma-separated rendering for list-valued keys.
pub fn join<V: Display>(values: &[V]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_read() {
        let cfg = KvConfig::parse("# hdr\n\na = 3\nb.c=0.5 # trailing\nlist = 1, 2,3\nflag = true\n").unwrap();
        let r = cfg.reader();
        assert_eq!(r.required::<usize>("a").unwrap(), 3);
        assert_eq!(r.parse_or("b.c", 0.0f64).unwrap(), 0.5);
        assert_eq!(r.list_or::<usize>("list", &[]).unwrap(), vec![1, 2, 3]);
        assert!(r.parse_or("flag", false).unwrap());
        assert_eq!(r.parse_or("absent", 7u32).unwrap(), 7);
        r.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_errors() {
        let cfg = KvConfig::parse("a = 1\nbb = 2\n").unwrap();
        let r = cfg.reader();
        r.required::<u8>("a").unwrap();
        let err = r.finish().unwrap_err().to_string();
        assert!(err.contains("`bb`"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        for (text, line) in [("a = 1\nnope\n", 2), ("A = 1", 1), ("a = 1\na = 2", 2), (" = 3", 1)] {
            match KvConfig::parse(text) {
                Err(FormatError::Text { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn type_errors_name_the_key() {
        let cfg = KvConfig::parse("lr = fast").unwrap();
        let err = cfg.reader().parse_or("lr", 0.1f64).unwrap_err().to_string();
        assert!(err.contains("lr"));
    }

    #[test]
    fn text_round_trip_and_sections() {
        let mut cfg = KvConfig::new();
        cfg.set("model", "unet");
        cfg.set("unet.depth", 3);
        cfg.set("unet.attention", true);
        cfg.set("model", "hybrid");
        let back = KvConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.section("unet").get("depth"), Some("3"));
        assert_eq!(back.keys().next(), Some("model"));
    }
}
