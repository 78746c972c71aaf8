//! Flat `key = value` experiment configuration.
//!
//! UTF-8 text, one binding per line, `#` starts a comment line, dotted keys
//! namespace stages (`sf.tau = 0.1`). Unknown and duplicate keys are errors:
//! a typo should fail loudly, not silently fall back to a default. Relative
//! paths resolve against the config file's own directory, so a config and
//! its data files travel together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Result, SfError};

/// Every key any stage understands.
const ALLOWED_KEYS: &[&str] = &[
    "seed",
    "out",
    "max_len",
    "corpus",
    "tokenize",
    "min_count",
    "lm.order",
    "lm.alpha",
    "lm.weights",
    "features.dim",
    "features.samples",
    "features.hidden",
    "features.out",
    "features.lr",
    "features.epochs",
    "features.batch",
    "features.weight_decay",
    "subjects",
    "fit.subject",
    "fit.lexicon",
    "fit.ridge",
    "sf.algorithm",
    "sf.gamma",
    "sf.tau",
    "sf.lr",
    "sf.epochs",
    "sf.batch",
    "sf.warmup",
    "sf.hidden",
    "sf.embed",
    "sf.trajectories",
    "sf.top_k",
    "gen.prompts",
    "gen.n",
    "gen.top_k",
    "gen.fusion",
    "gen.subjects",
    "oracle.subject",
    "oracle.top_k",
    "oracle.max_len",
    "oracle.depth",
];

/// A parsed, validated configuration plus the directory its relative paths
/// resolve against.
#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
    dir: PathBuf,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SfError::Config(format!("cannot read config {path:?}: {e}")))?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Config::parse(&text, dir)
    }

    /// Parse config text with an explicit base directory.
    pub fn parse(text: &str, dir: PathBuf) -> Result<Config> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SfError::Config(format!("config line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !ALLOWED_KEYS.contains(&key.as_str()) {
                return Err(SfError::Config(format!(
                    "config line {}: unknown key '{key}'",
                    lineno + 1
                )));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(SfError::Config(format!(
                    "config line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
        }
        Ok(Config { values, dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(ALLOWED_KEYS.contains(&key), "unlisted key {key:?}");
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| SfError::Config(format!("missing required config key '{key}'")))
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_number(key, v)),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_number(key, v)),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_number(key, v)),
        }
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.parse().map_err(|_| bad_number(key, v))
    }

    /// A required path, resolved against the config's directory.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(self.resolve(self.require(key)?))
    }

    pub fn resolve(&self, raw: &str) -> PathBuf {
        let p = Path::new(raw);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    /// Comma-separated floats (e.g. interpolation weights).
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(raw) = self.get(key) else {
            return Ok(None);
        };
        let mut out = Vec::new();
        for part in raw.split(',') {
            let part = part.trim();
            out.push(part.parse().map_err(|_| bad_number(key, part))?);
        }
        Ok(Some(out))
    }

    /// Comma-separated `name:path` pairs (subject lexicons).
    pub fn name_path_pairs(&self, key: &str) -> Result<Vec<(String, PathBuf)>> {
        let raw = self.require(key)?;
        let mut out = Vec::new();
        for part in raw.split(',') {
            let part = part.trim();
            let (name, path) = part.split_once(':').ok_or_else(|| {
                SfError::Config(format!("key '{key}': expected 'name:path', got '{part}'"))
            })?;
            let name = name.trim();
            if name.is_empty() {
                return Err(SfError::Config(format!("key '{key}': empty subject name")));
            }
            out.push((name.to_string(), self.resolve(path.trim())));
        }
        if out.is_empty() {
            return Err(SfError::Config(format!("key '{key}': no entries")));
        }
        Ok(out)
    }

    /// Comma-separated names; empty string means an empty list.
    pub fn names_list(&self, key: &str) -> Option<Vec<String>> {
        let raw = self.get(key)?;
        if raw.trim().is_empty() {
            return Some(Vec::new());
        }
        Some(raw.split(',').map(|s| s.trim().to_string()).collect())
    }
}

fn bad_number(key: &str, value: &str) -> SfError {
    SfError::Config(format!("key '{key}': expected a number, got '{value}'"))
}
