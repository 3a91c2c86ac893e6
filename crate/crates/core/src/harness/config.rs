//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are consumed by
//! the typed readers; any key left over afterwards is reported as unknown.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Result, SvitError};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(SvitError::config(format!("line {}: expected key = value", n + 1)));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(SvitError::config(format!("line {}: empty key", n + 1)));
            }
            let value = v.trim().trim_matches('"').to_string();
            if entries.insert(key.clone(), (n + 1, value)).is_some() {
                return Err(SvitError::config(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Removes and parses `key` if present.
    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse().map(Some).map_err(|_| {
                SvitError::config(format!("line {line}: cannot parse {key} = {raw:?}"))
            }),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn take_into<V: FromStr>(&mut self, key: &str, slot: &mut V) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// `lo,hi` pair.
    pub fn take_pair(&mut self, key: &str, slot: &mut (f64, f64)) -> Result<()> {
        let Some(raw) = self.take::<String>(key)? else {
            return Ok(());
        };
        let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [a, b] => match (a.parse(), b.parse()) {
                (Ok(a), Ok(b)) => {
                    *slot = (a, b);
                    Ok(())
                }
                _ => Err(SvitError::config(format!("{key}: cannot parse pair {raw:?}"))),
            },
            _ => Err(SvitError::config(format!("{key}: expected lo,hi, got {raw:?}"))),
        }
    }

    /// Fails if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(SvitError::config(format!("line {line}: unknown key {key}")));
        }
        Ok(())
    }
}
