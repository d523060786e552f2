//! Plain-text `key = value` manifests.
//!
//! One entry per line, UTF-8. `#` starts a comment that runs to the end of the
//! line. Blank lines are ignored. Keys are unique; entry order is preserved.

use std::fmt::{self, Display};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(Error::Manifest {
                    line,
                    msg: format!("expected `key = value`, got `{content}`"),
                });
            };
            let (key, value) = (k.trim(), v.trim());
            if key.is_empty() {
                return Err(Error::Manifest {
                    line,
                    msg: "empty key".into(),
                });
            }
            if let Some(prev) = m.entries.iter().find(|e| e.key == key) {
                return Err(Error::Manifest {
                    line,
                    msg: format!("duplicate key `{key}` (first on line {})", prev.line),
                });
            }
            m.entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    /// Inserts or replaces `key`.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|e| e.key == key) {
            Some(e) => e.value = value,
            None => self.entries.push(Entry {
                key: key.to_string(),
                value,
                line: 0,
            }),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entry(key).map(|e| e.value.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entry(key).is_some()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.key.as_str())
    }

    /// Keys not covered by any of the given exact names or `prefix.` groups.
    pub fn unknown_keys<'a>(&'a self, known: &[&str], prefixes: &[&str]) -> Vec<&'a str> {
        self.keys()
            .filter(|k| {
                !known.contains(k)
                    && !prefixes
                        .iter()
                        .any(|p| k.strip_prefix(p).is_some_and(|rest| rest.starts_with('.')))
            })
            .collect()
    }

    fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    fn bad(&self, key: &str, msg: String) -> Error {
        Error::Manifest {
            line: self.entry(key).map_or(0, |e| e.line),
            msg: format!("`{key}`: {msg}"),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self
            .get(key)
            .ok_or_else(|| self.bad(key, "missing required key".into()))?;
        raw.parse()
            .map_err(|e: T::Err| self.bad(key, format!("cannot parse `{raw}`: {e}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        if self.contains(key) {
            self.require(key)
        } else {
            Ok(default)
        }
    }

    /// Comma-separated list; `None` when the key is absent.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(raw) = self.get(key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(|s| {
                let s = s.trim();
                s.parse()
                    .map_err(|e: T::Err| self.bad(key, format!("cannot parse item `{s}`: {e}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }
}

/// Renders a list in the comma-separated form read by [`Manifest::list`].
pub fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{} = {}", e.key, e.value)?;
        }
        Ok(())
    }
}

impl FromStr for Manifest {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let m = Manifest::parse("# header\n\n d0 = 96  # embedding width\nlayers=1, 2,11,2\n").unwrap();
        assert_eq!(m.get("d0"), Some("96"));
        assert_eq!(m.require::<usize>("d0").unwrap(), 96);
        assert_eq!(m.list::<usize>("layers").unwrap(), Some(vec![1, 2, 11, 2]));
        assert_eq!(m.get_or("nu", 4usize).unwrap(), 4);
    }

    #[test]
    fn reports_line_numbers() {
        let err = Manifest::parse("a = 1\nnot a pair\n").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }));
        let err = Manifest::parse("a = 1\n\na = 2\n").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 3, .. }));
        let m = Manifest::parse("x = 1\nd0 = wide\n").unwrap();
        let err = m.require::<usize>("d0").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
    }

    #[test]
    fn roundtrip_and_unknown_keys() {
        let mut m = Manifest::new();
        m.set("policy", "mixed");
        m.set("train.lr_peak", 0.001);
        m.set("policy", "alldot");
        let back = Manifest::parse(&m.to_string()).unwrap();
        assert_eq!(back.get("policy"), Some("alldot"));
        assert_eq!(back.require::<f64>("train.lr_peak").unwrap(), 0.001);
        let mut with_typo = back.clone();
        with_typo.set("polcy", "x");
        with_typo.set("trainx.a", 1);
        assert_eq!(with_typo.unknown_keys(&["policy"], &["train"]), vec!["polcy", "trainx.a"]);
    }
}
