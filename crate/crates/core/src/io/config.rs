//! Flat `key = value` run-config files. Units live in key names
//! (`radius_km`, `learning_rate`), `#` starts a comment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
    /// Directory relative paths are resolved against.
    base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map(|(a, _)| a).unwrap_or(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("config line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return Err(Error::Input(format!("config line {}: bad key '{k}'", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Input(format!("config line {}: duplicate key '{k}'", n + 1)));
            }
        }
        Ok(Self { entries, base_dir: base_dir.to_path_buf() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>, base_dir: &Path) -> Self {
        Self { entries: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(), base_dir: base_dir.to_path_buf() }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Rejects keys outside `allowed` so typos do not pass silently.
    pub fn check_known(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::Input(format!("unknown config key '{k}'"))),
            None => Ok(()),
        }
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("config key '{key}' is required")))
    }

    pub fn opt_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.str(key)?;
        v.parse().map_err(|e| Error::Input(format!("config key '{key}' = '{v}': {e}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if self.contains(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.contains(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(self.resolve(self.str(key)?))
    }

    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        self.opt_str(key).map(|p| self.resolve(p))
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| Error::Input(format!("config key '{key}' item '{s}': {e}"))))
            .collect()
    }

    /// Sorted `key=value` lines, the form that is hashed.
    pub fn canonical(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_types() {
        let c = RunConfig::parse("# run\nseed = 7\nlearning_rate=1e-4 # adam\nname = a b\nlist = 1, 2,3\n", Path::new("/tmp")).unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 7);
        assert_eq!(c.get::<f64>("learning_rate").unwrap(), 1e-4);
        assert_eq!(c.str("name").unwrap(), "a b");
        assert_eq!(c.list::<u32>("list").unwrap(), vec![1, 2, 3]);
        assert_eq!(c.get_or("missing", 3usize).unwrap(), 3);
        assert!(c.get::<u64>("name").is_err());
        assert!(c.str("missing").is_err());
    }

    #[test]
    fn rejects_malformed() {
        assert!(RunConfig::parse("novalue\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("a = 1\na = 2\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("a b = 1\n", Path::new(".")).is_err());
        let c = RunConfig::parse("a = 1\nb = 2\n", Path::new(".")).unwrap();
        assert!(c.check_known(&["a"]).is_err());
        assert!(c.check_known(&["a", "b"]).is_ok());
    }

    #[test]
    fn hash_ignores_layout() {
        let a = RunConfig::parse("a = 1\nb = 2\n", Path::new(".")).unwrap();
        let b = RunConfig::parse("# c\nb=2\n\na=1", Path::new(".")).unwrap();
        let c = RunConfig::parse("a = 1\nb = 3\n", Path::new(".")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn relative_paths_follow_config() {
        let c = RunConfig::parse("out = runs/x\nabs = /data/y\n", Path::new("/cfg")).unwrap();
        assert_eq!(c.path("out").unwrap(), PathBuf::from("/cfg/runs/x"));
        assert_eq!(c.path("abs").unwrap(), PathBuf::from("/data/y"));
    }
}
