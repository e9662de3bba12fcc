//! Flat `key = value` configuration files. `#` starts a comment; blank lines
//! are ignored. Unknown and repeated keys are errors.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigFile {
    /// Shown in diagnostics.
    pub path: String,
    pub entries: Vec<ConfigEntry>,
}

impl ConfigFile {
    pub fn parse(text: &str, path: &str, known: &[&str]) -> Result<Self> {
        let mut entries: Vec<ConfigEntry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| Error::ConfigLine {
                path: path.to_string(),
                line,
                msg,
            };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{content}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("missing key".into()));
            }
            if !known.contains(&k) {
                return Err(err(format!("unknown key `{k}`")));
            }
            if let Some(prev) = entries.iter().find(|e| e.key == k) {
                return Err(err(format!("key `{k}` already set on line {}", prev.line)));
            }
            entries.push(ConfigEntry {
                key: k.to_string(),
                value: v.to_string(),
                line,
            });
        }
        Ok(Self {
            path: path.to_string(),
            entries,
        })
    }

    pub fn get(&self, key: &str) -> Option<&ConfigEntry> {
        self.entries.iter().find(|e| e.key == key)
    }

    /// Parses the value of `key` if present, reporting failures on its line.
    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.get(key) else { return Ok(None) };
        e.value.parse::<T>().map(Some).map_err(|err| self.error_at(e.line, format!("`{key}`: {err}")))
    }

    /// Comma-separated list value.
    pub fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.get(key) else { return Ok(None) };
        e.value
            .split(',')
            .map(|s| s.trim().parse::<T>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|err| self.error_at(e.line, format!("`{key}`: {err}")))
    }

    pub fn error_at(&self, line: usize, msg: String) -> Error {
        Error::ConfigLine {
            path: self.path.clone(),
            line,
            msg,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KNOWN: &[&str] = &["tau", "bins"];

    #[test]
    fn parses_with_comments() {
        let c = ConfigFile::parse("# header\n\ntau = 0.4 # inline\nbins=0.1,0.3\n", "c.cfg", KNOWN).unwrap();
        assert_eq!(c.parse_value::<f64>("tau").unwrap(), Some(0.4));
        assert_eq!(c.parse_list::<f64>("bins").unwrap(), Some(vec![0.1, 0.3]));
        assert_eq!(c.get("tau").unwrap().line, 3);
    }

    #[test]
    fn rejects_with_line_numbers() {
        let e = ConfigFile::parse("tau = 1\ntua = 2\n", "c.cfg", KNOWN).unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 2, ref msg, .. } if msg.contains("tua")));
        assert_eq!(e.to_string(), "c.cfg:2: unknown key `tua`");
        let e = ConfigFile::parse("tau 1\n", "c.cfg", KNOWN).unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 1, .. }));
        let e = ConfigFile::parse("tau = 1\ntau = 2\n", "c.cfg", KNOWN).unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 2, .. }));
        let c = ConfigFile::parse("\ntau = x\n", "c.cfg", KNOWN).unwrap();
        assert!(matches!(c.parse_value::<f64>("tau"), Err(Error::ConfigLine { line: 2, .. })));
    }
}
