//! Run settings: command defaults, overlaid by an optional config file, then
//! `--set key=value` pairs, then dedicated flags. The resolved table is what
//! every command writes to `config_echo.txt`, and feeding that file back with
//! `--config` repeats the run.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Args;
use glioma_core::config::KvConfig;
use glioma_core::{Error, Result};

pub const ECHO_FILE: &str = "config_echo.txt";

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Key-value configuration file (for example a previous run's config_echo.txt).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub command: &'static str,
    pub kv: KvConfig,
    /// Keys given by the file, `--set` or a flag rather than by default.
    explicit: BTreeSet<String>,
}

/// Applies the file, `--set` pairs and flags (in that order) over
/// `defaults`. Keys outside the defaults are rejected.
pub fn resolve(
    command: &'static str,
    defaults: KvConfig,
    args: &ConfigArgs,
    flags: Vec<(&'static str, Option<String>)>,
) -> Result<Resolved> {
    let mut r = Resolved {
        command,
        kv: defaults,
        explicit: BTreeSet::new(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = KvConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in file.entries() {
            if k == "command" {
                if v != command {
                    return Err(Error::Config(format!(
                        "{} was written by `{v}`, not `{command}`",
                        path.display()
                    )));
                }
                continue;
            }
            r.apply(k, v)?;
        }
    }
    for pair in &args.sets {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        r.apply(k.trim(), v.trim())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            r.apply(k, &v)?;
        }
    }
    Ok(r)
}

impl Resolved {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if self.kv.get(key).is_none() {
            let known: Vec<&str> = self.kv.keys().collect();
            return Err(Error::Config(format!(
                "unknown key `{key}` for {}; known keys: {}",
                self.command,
                known.join(", ")
            )));
        }
        if value.contains(['#', '\n']) {
            return Err(Error::Config(format!("value for `{key}` may not contain # or a newline")));
        }
        self.kv.set(key, value);
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.kv.get(key).unwrap_or_else(|| panic!("`{key}` is not in the {} schema", self.command))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
    }

    /// A path-valued key that must be set.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.optional_path(key)
            .ok_or_else(|| Error::Config(format!("`{key}` is required (--{})", key.replace('_', "-"))))
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Drops every key under `prefix.` that was not given explicitly.
    pub fn drop_defaults_under(&mut self, prefix: &str) {
        let p = format!("{prefix}.");
        let mut kept = KvConfig::new();
        for (k, v) in self.kv.entries() {
            if !k.starts_with(&p) || self.explicit.contains(k) {
                kept.set(k, v);
            }
        }
        self.kv = kept;
    }

    /// Keys in `keys` plus every key under the listed prefixes.
    pub fn subset(&self, keys: &[&str], prefixes: &[&str]) -> KvConfig {
        let mut out = KvConfig::new();
        for (k, v) in self.kv.entries() {
            let under = prefixes.iter().any(|p| k.strip_prefix(p).is_some_and(|r| r.starts_with('.')));
            if keys.contains(&k.as_str()) || under {
                out.set(k, v);
            }
        }
        out
    }

    pub fn echo_text(&self) -> String {
        format!("command = {}\n{}", self.command, self.kv.to_text())
    }

    pub fn write_echo(&self, out_dir: &Path) -> Result<()> {
        write_file(&out_dir.join(ECHO_FILE), self.echo_text().as_bytes())
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("lr", 0.1);
        kv.set("seed", 0);
        kv.set("aug.scale", 1);
        kv.set("data", "");
        kv
    }

    #[test]
    fn later_sources_win() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        std::fs::write(&file, "command = x\nlr = 0.5\nseed = 3\n").unwrap();
        let args = ConfigArgs {
            config: Some(file),
            sets: vec!["seed=4".into()],
        };
        let r = resolve("x", defaults(), &args, vec![("lr", Some("0.25".into())), ("data", None)]).unwrap();
        assert_eq!(r.get("lr"), "0.25");
        assert_eq!(r.get("seed"), "4");
        assert!(r.explicit.contains("seed") && !r.explicit.contains("data"));
        assert!(r.path("data").is_err());
        assert_eq!(r.echo_text(), "command = x\nlr = 0.25\nseed = 4\naug.scale = 1\ndata = \n");
    }

    #[test]
    fn unknown_keys_and_foreign_echoes_are_rejected() {
        let bad = ConfigArgs {
            config: None,
            sets: vec!["lrr=1".into()],
        };
        assert!(matches!(resolve("x", defaults(), &bad, vec![]), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        std::fs::write(&file, "command = y\n").unwrap();
        let foreign = ConfigArgs {
            config: Some(file),
            sets: vec![],
        };
        assert!(matches!(resolve("x", defaults(), &foreign, vec![]), Err(Error::Config(_))));
    }

    #[test]
    fn echo_replays_to_the_same_table() {
        let args = ConfigArgs {
            config: None,
            sets: vec!["aug.scale=2".into()],
        };
        let first = resolve("x", defaults(), &args, vec![("seed", Some("9".into()))]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        first.write_echo(dir.path()).unwrap();
        let replay = ConfigArgs {
            config: Some(dir.path().join(ECHO_FILE)),
            sets: vec![],
        };
        let second = resolve("x", defaults(), &replay, vec![]).unwrap();
        assert_eq!(first.kv, second.kv);
    }

    #[test]
    fn dropping_defaults_keeps_explicit_keys() {
        let args = ConfigArgs::default();
        let mut r = resolve("x", defaults(), &args, vec![]).unwrap();
        r.drop_defaults_under("aug");
        assert!(r.kv.get("aug.scale").is_none());
        assert_eq!(r.subset(&["lr"], &["aug"]).to_text(), "lr = 0.1\n");
    }
}
