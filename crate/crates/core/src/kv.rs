//! Flat `key = value` text used for configuration files and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`: {msg}")]
    Value { key: String, value: String, msg: String },
}

/// Parsed key-value document. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: BTreeMap<String, String>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(KvError::Duplicate(k.to_string()));
            }
        }
        Ok(KvDoc { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>, KvError>
    where
        V::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<V>().map_err(|e| KvError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    msg: e.to_string(),
                })
            })
            .transpose()
    }

    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V, KvError>
    where
        V::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<V: FromStr>(&self, key: &str) -> Result<V, KvError>
    where
        V::Err: Display,
    {
        self.get(key)?.ok_or_else(|| KvError::Missing(key.to_string()))
    }

    /// Comma-separated list value.
    pub fn list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>, KvError>
    where
        V::Err: Display,
    {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|part| {
                part.trim().parse::<V>().map_err(|e| KvError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Fails on any key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), KvError> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(KvError::Unknown(k.clone())),
            None => Ok(()),
        }
    }

    /// Serializes in sorted key order.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

pub fn join_list<V: Display>(items: &[V]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_roundtrip() {
        let doc = KvDoc::parse("# comment\nlr = 0.01\n\nchannels = 1, 2,3 # trailing\n").unwrap();
        assert_eq!(doc.get::<f64>("lr").unwrap(), Some(0.01));
        assert_eq!(doc.list::<usize>("channels").unwrap(), Some(vec![1, 2, 3]));
        let again = KvDoc::parse(&doc.render()).unwrap();
        assert_eq!(again.get::<f64>("lr").unwrap(), Some(0.01));
    }

    #[test]
    fn errors() {
        assert!(matches!(KvDoc::parse("nonsense"), Err(KvError::Syntax { line: 1, .. })));
        assert!(matches!(KvDoc::parse("a=1\na=2"), Err(KvError::Duplicate(_))));
        let doc = KvDoc::parse("a = x").unwrap();
        assert!(matches!(doc.get::<u32>("a"), Err(KvError::Value { .. })));
        assert!(matches!(doc.check_keys(&["b"]), Err(KvError::Unknown(_))));
    }
}
