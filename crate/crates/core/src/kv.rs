//! Flat `key = value` text used for dataset metadata, world specs and
//! experiment configs.
//!
//! One entry per line. `#` starts a comment, blank lines are skipped,
//! keys are case-sensitive and must be unique within a document.

use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDocument {
    entries: Vec<Entry>,
}

impl KvDocument {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line,
                    message: format!("expected `key = value`, found `{content}`"),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line,
                    message: "empty key".into(),
                });
            }
            if entries.iter().any(|e| e.key == key) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.key == key).map(|e| e.value.as_str())
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        let line = self.entries.len() + 1;
        self.entries.push(Entry {
            key: key.into(),
            value: value.to_string(),
            line,
        });
    }

    /// Rejects any key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str], origin: &Path) -> Result<()> {
        for e in &self.entries {
            if !allowed.contains(&e.key.as_str()) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: e.line,
                    message: format!("unknown key `{}`", e.key),
                });
            }
        }
        Ok(())
    }

    pub fn require(&self, key: &str, origin: &Path) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            message: format!("missing key `{key}`"),
        })
    }

    pub fn parse_value<T>(&self, key: &str, origin: &Path) -> Result<Option<T>>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        let Some(entry) = self.entries.iter().find(|e| e.key == key) else {
            return Ok(None);
        };
        entry.value.parse::<T>().map(Some).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: entry.line,
            message: format!("bad value for `{key}`: {e}"),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.key);
            out.push_str(" = ");
            out.push_str(&e.value);
            out.push('\n');
        }
        out
    }
}
