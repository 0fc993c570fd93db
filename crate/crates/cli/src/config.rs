//! `key = value` run configuration files, merged under command-line flags.

use std::collections::{BTreeMap, BTreeSet};
use std::cell::RefCell;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Environment variable consulted for the seed when neither a flag nor the
/// config file sets one.
pub const SEED_ENV: &str = "IMVALIGN_SEED";

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected `key = value`", n + 1)))?;
            let key = k.trim().replace('-', "_");
            if key.is_empty() {
                return Err(CliError::usage(format!("config line {}: empty key", n + 1)));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::usage(format!("config line {}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(Self {
            values,
            used: RefCell::default(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.used.borrow_mut().insert(key.to_string());
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::usage(format!("config key {key:?}: cannot parse {v:?}"))),
        }
    }

    /// Flag, then config file, then `default`.
    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        let file = self.file_value(key)?;
        Ok(flag.or(file).unwrap_or(default))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        let file = self.file_value(key)?;
        Ok(flag.or(file))
    }

    /// Boolean switches: a set flag wins, otherwise the file decides.
    pub fn switch(&self, key: &str, flag: bool) -> Result<bool, CliError> {
        Ok(flag || self.file_value(key)?.unwrap_or(false))
    }

    /// Flag, config file, `IMVALIGN_SEED`, then 0.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = self.get_opt("seed", flag)? {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{SEED_ENV}={v:?} is not a seed"))),
            Err(_) => Ok(0),
        }
    }

    /// Fails on keys no option consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::usage(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }
}
