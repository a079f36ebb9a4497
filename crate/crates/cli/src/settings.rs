//! Resolution of run settings: built-in default, then config file, then flag.
//! Every resolved value is recorded for the output manifest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use fmrsv_core::io::read_kv;
use fmrsv_core::{Error, Result};

pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&str>) -> Result<Self> {
        let file = match path {
            Some(p) => read_kv(Path::new(p))?,
            None => BTreeMap::new(),
        };
        let mut resolved = BTreeMap::new();
        if let Some(p) = path {
            resolved.insert("config".to_string(), p.to_string());
        }
        Ok(Settings { file, resolved })
    }

    fn from_file<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|raw| raw.parse::<T>().map_err(|e| Error::Validation(format!("config key `{key}`: {e}"))))
            .transpose()
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        self.resolved.insert(key.to_string(), v.as_ref().map_or_else(|| "none".to_string(), T::to_string));
        Ok(v)
    }

    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.opt(key, flag)?
            .ok_or_else(|| Error::Validation(format!("`--{key}` is required (flag or config file)")))
    }

    /// The resolved settings; fails on config keys that no option consumed.
    pub fn finish(&self) -> Result<BTreeMap<String, String>> {
        if let Some(k) = self.file.keys().find(|k| !self.resolved.contains_key(*k)) {
            return Err(Error::Validation(format!("unknown config key `{k}`")));
        }
        Ok(self.resolved.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_file(text: &str) -> Settings {
        Settings { file: fmrsv_core::io::parse_kv(text).unwrap(), resolved: BTreeMap::new() }
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let mut s = with_file("burn = 50\nkeep = 70\n");
        assert_eq!(s.get("burn", Some(10usize), 1).unwrap(), 10);
        assert_eq!(s.get("keep", None, 1usize).unwrap(), 70);
        assert_eq!(s.get("thin", None, 3usize).unwrap(), 3);
        let r = s.finish().unwrap();
        assert_eq!(r["burn"], "10");
        assert_eq!(r["keep"], "70");
        assert_eq!(r["thin"], "3");
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let s = with_file("bogus = 1\n");
        assert!(s.finish().unwrap_err().is_validation());
        let mut s = with_file("burn = many\n");
        assert!(s.get("burn", None, 1usize).unwrap_err().is_validation());
    }

    #[test]
    fn missing_required_fails() {
        let mut s = with_file("");
        assert!(s.required::<String>("out", None).is_err());
        assert_eq!(s.opt::<u64>("blocks", None).unwrap(), None);
        assert_eq!(s.finish().unwrap()["blocks"], "none");
    }
}
