//! Flat `key=value` configuration files. Every file carries a `version` key;
//! blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KvFile {
    pub version: u32,
    map: BTreeMap<String, String>,
}

impl KvFile {
    pub fn new() -> KvFile {
        KvFile { version: CONFIG_VERSION, map: BTreeMap::new() }
    }

    pub fn parse(text: &str) -> Result<KvFile> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Validation(format!("config line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Validation(format!("config line {}: empty key", lineno + 1)));
            }
            if map.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Validation(format!("duplicate config key `{key}`")));
            }
        }
        let version = match map.remove("version") {
            Some(v) => v
                .parse::<u32>()
                .map_err(|_| Error::Validation(format!("unparseable version `{v}`")))?,
            None => return Err(Error::Validation("config is missing a version key".into())),
        };
        if version != CONFIG_VERSION {
            return Err(Error::Validation(format!(
                "unsupported config version {version}, expected {CONFIG_VERSION}"
            )));
        }
        Ok(KvFile { version, map })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Validation(format!("missing config key `{key}`")))?;
        raw.parse::<T>().map_err(|e| Error::Validation(format!("config key `{key}`: {e}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(key) {
            Some(raw) => {
                raw.parse::<T>().map_err(|e| Error::Validation(format!("config key `{key}`: {e}")))
            }
            None => Ok(default),
        }
    }

    /// Rejects keys outside `allowed`, catching typos early.
    pub fn ensure_only(&self, allowed: &[&str]) -> Result<()> {
        for key in self.map.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Validation(format!("unknown config key `{key}`")));
            }
        }
        Ok(())
    }

    /// Canonical text form: version first, then keys in sorted order.
    pub fn serialize(&self) -> String {
        let mut out = format!("version={}\n", self.version);
        for (k, v) in &self.map {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
