//! Plain-text key=value config files with CLI-flag override (flags win).

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parsed key=value file. Keys must come from the caller's allow-list;
/// anything else is rejected up front.
#[derive(Debug, Default, Clone)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn load(path: &Path, allowed: &[&str]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, allowed).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected key=value, got '{line}'", ln + 1);
            };
            let k = k.trim();
            if !allowed.contains(&k) {
                bail!("line {}: unknown key '{k}' (allowed: {})", ln + 1, allowed.join(", "));
            }
            if values.insert(k.to_string(), v.trim().to_string()).is_some() {
                bail!("line {}: duplicate key '{k}'", ln + 1);
            }
        }
        Ok(KvConfig { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    /// Flag value wins over the file value; parses whichever is present.
    pub fn resolve<T: std::str::FromStr>(
        &self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            Some(s) => s
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("config key '{key}': bad value '{s}': {e}")),
            None => Ok(default),
        }
    }

    pub fn resolve_opt<T: std::str::FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.get(key) {
            Some(s) => s
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key '{key}': bad value '{s}': {e}")),
            None => Ok(None),
        }
    }
}
