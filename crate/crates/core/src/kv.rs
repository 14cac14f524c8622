//! Plain-text `key = value` configuration files.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored and
//! repeating a key is an error. Values are kept verbatim (trimmed) so a
//! resolved config can be echoed back byte-for-byte.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {line:?}", lineno + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            if map.entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
        }
        Ok(map)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Parses `key` if present.
    pub fn parse_opt<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: Display,
    {
        self.get(key)
            .map(|raw| {
                raw.parse::<V>()
                    .map_err(|e| Error::config(format!("{key} = {raw:?}: {e}")))
            })
            .transpose()
    }

    /// Parses `key` into `target` when present, leaving the default otherwise.
    pub fn read_into<V: FromStr>(&self, key: &str, target: &mut V) -> Result<()>
    where
        V::Err: Display,
    {
        if let Some(v) = self.parse_opt(key)? {
            *target = v;
        }
        Ok(())
    }

    /// Comma separated list of exactly `N` values.
    pub fn read_array<V: FromStr + Copy, const N: usize>(&self, key: &str, target: &mut [V; N]) -> Result<()>
    where
        V::Err: Display,
    {
        let Some(raw) = self.get(key) else {
            return Ok(());
        };
        let items: Vec<&str> = raw.split(',').map(str::trim).collect();
        if items.len() != N {
            return Err(Error::config(format!("{key} needs {N} comma separated values, got {raw:?}")));
        }
        for (slot, item) in target.iter_mut().zip(items) {
            *slot = item
                .parse()
                .map_err(|e| Error::config(format!("{key} = {raw:?}: {e}")))?;
        }
        Ok(())
    }

    /// Fails on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::config(format!("unknown key {k}"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn join<V: Display>(values: &[V]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_duplicates() {
        let kv = KvMap::parse("# header\n a = 1 \n\nb=x y # trailing\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("x y"));
        assert!(KvMap::parse("a=1\na=2").is_err());
        assert!(KvMap::parse("no equals sign").is_err());
    }

    #[test]
    fn typed_reads() {
        let kv = KvMap::parse("n = 3\nwidths = 1, 2,3\nbad = x").unwrap();
        let mut n = 0usize;
        kv.read_into("n", &mut n).unwrap();
        assert_eq!(n, 3);
        let mut w = [0usize; 3];
        kv.read_array("widths", &mut w).unwrap();
        assert_eq!(w, [1, 2, 3]);
        let mut short = [0usize; 2];
        assert!(kv.read_array("widths", &mut short).is_err());
        assert!(kv.read_into("bad", &mut n).is_err());
        assert!(kv.check_known(&["n", "widths"]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let kv = KvMap::parse("b = 2\na = 1\n").unwrap();
        assert_eq!(KvMap::parse(&kv.to_text()).unwrap(), kv);
    }
}
