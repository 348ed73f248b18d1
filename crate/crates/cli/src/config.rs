use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

/// Values from a `key=value` file. `#` starts a comment; blank lines are
/// ignored; a repeated key keeps its last value.
#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn parse(text: &str, allowed: &BTreeSet<String>) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            let key = k.trim().replace('_', "-");
            if !allowed.contains(&key) {
                return Err(CliError::config(format!("line {}: unknown key {key:?}", i + 1)));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    pub fn load(path: &Path, allowed: &BTreeSet<String>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, allowed)
    }

    /// The flag if given, else the file value, else `None`.
    pub fn pick<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::config(format!("{key}={v}: {e}"))),
        }
    }

    pub fn or<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick(key, flag)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.pick(key, flag)?
            .ok_or_else(|| CliError::usage(format!("missing --{key}")))
    }
}
