//! Plain-text `key = value` configuration files.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::Grid;

/// Parsed pairs; later duplicates override earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

/// Parses lines of `key = value`; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut entries = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        entries.insert(k.to_string(), v.trim().to_string());
    }
    Ok(KvMap { entries })
}

impl KvMap {
    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
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

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get_str(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("key {key:?}: cannot parse {raw:?}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        if self.contains(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    /// Rejects any key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join("x")
}

fn split_list<T: FromStr>(kv: &KvMap, key: &str) -> Result<Vec<T>> {
    kv.get_str(key)?
        .split('x')
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("key {key:?}: bad entry {s:?}"))))
        .collect()
}

/// Stores `dims` and `spacing` as `AxB[xC]` lists.
pub(crate) fn insert_grid(kv: &mut KvMap, grid: &Grid) {
    kv.insert("dims", join(grid.dims()));
    kv.insert("spacing", join(grid.spacing()));
}

pub(crate) fn read_grid(kv: &KvMap) -> Result<Grid> {
    Grid::with_spacing(&split_list::<usize>(kv, "dims")?, &split_list::<f64>(kv, "spacing")?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = parse_kv("# c\nalpha = 3.0\n\nC=2 # two\nalpha = 2.5\n").unwrap();
        assert_eq!(kv.get::<f64>("alpha").unwrap(), 2.5);
        assert_eq!(kv.get::<usize>("C").unwrap(), 2);
        assert!(kv.get::<usize>("alpha").is_err());
        assert!(kv.check_keys(&["alpha"]).is_err());
        assert!(parse_kv("novalue").is_err());
        assert_eq!(parse_kv(&kv.to_text()).unwrap(), kv);
    }

    #[test]
    fn grid_round_trip() {
        let g = Grid::with_spacing(&[4, 6, 5], &[1.0, 0.5, 2.25]).unwrap();
        let mut kv = KvMap::default();
        insert_grid(&mut kv, &g);
        assert_eq!(read_grid(&parse_kv(&kv.to_text()).unwrap()).unwrap(), g);
    }
}
