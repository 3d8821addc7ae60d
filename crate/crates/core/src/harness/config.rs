use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// Reads a TOML table from `path` (or starts empty), applies `key=value`
/// overrides with dotted keys, then deserializes. Override values are parsed
/// as TOML and fall back to plain strings.
pub fn load_config<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut cur = &mut table;
        for p in &parts[..parts.len() - 1] {
            let entry = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), value);
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, PartialEq)]
    struct Inner {
        speakers: usize,
    }

    #[derive(Debug, Deserialize, PartialEq)]
    struct Cfg {
        steps: usize,
        name: String,
        inner: Inner,
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "steps = 3\nname = \"a\"\n[inner]\nspeakers = 4\n").unwrap();
        let c: Cfg = load_config(Some(&p), &["inner.speakers=9".into(), "name=plain".into()]).unwrap();
        assert_eq!(c, Cfg { steps: 3, name: "plain".into(), inner: Inner { speakers: 9 } });
        assert!(load_config::<Cfg>(Some(&p), &["steps".into()]).is_err());
        assert!(load_config::<Cfg>(Some(&p), &["steps=\"x\"".into()]).is_err());
    }
}
