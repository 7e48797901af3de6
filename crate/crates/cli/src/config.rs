//! Layered `key = value` configuration: command defaults, then an optional
//! file, then command-line flags.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use segdiff_core::kv::KeyValues;
use segdiff_core::{Error, Result};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.txt";

/// Merged settings of one command invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: KeyValues,
}

impl RunConfig {
    /// Layers `file` over `defaults`, then `flags` over both. Keys in the file
    /// that `allowed` does not list are rejected so typos surface early.
    pub fn resolve(
        defaults: KeyValues,
        file: Option<&KeyValues>,
        flags: &KeyValues,
        allowed: &[&str],
    ) -> Result<Self> {
        let mut values = defaults;
        if let Some(file) = file {
            if let Some(bad) = file
                .keys()
                .find(|k| !allowed.contains(k) && !is_open_key(k, allowed))
            {
                return Err(Error::Config(format!("unknown configuration key `{bad}`")));
            }
            values.merge(file);
        }
        values.merge(flags);
        Ok(RunConfig { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).filter(|v| !v.is_empty())
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.values.parse_req(key)
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.values.parse_opt(key),
        }
    }

    pub fn values(&self) -> &KeyValues {
        &self.values
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.set(key, value);
    }

    /// Writes the merged settings to `effective_config.txt` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        fs::write(&path, self.values.to_text()).map_err(|e| Error::io(&path, e))
    }
}

/// Prefix entries such as `band.*` admit any key below them.
fn is_open_key(key: &str, allowed: &[&str]) -> bool {
    allowed
        .iter()
        .filter_map(|a| a.strip_suffix('*'))
        .any(|prefix| key.starts_with(prefix))
}

pub fn read_file(path: Option<&Path>) -> Result<Option<KeyValues>> {
    let Some(path) = path else {
        return Ok(None);
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    KeyValues::parse(&text).map(Some)
}

/// Flag values that were actually given, as key-value pairs.
#[derive(Debug, Default)]
pub struct Flags(KeyValues);

impl Flags {
    pub fn put<T: ToString>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.set(key, v);
        }
        self
    }

    pub fn into_inner(self) -> KeyValues {
        self.0
    }
}
