//! JSON configuration files with dotted `key=value` overrides.
//!
//! Resolution order: built-in defaults, then the `--config` file (which may
//! be partial), then each `--set` in order. Values parse as JSON when they
//! can and fall back to a plain string, so `--set lr=2e-4` is a number and
//! `--set dataset=data/train` a string.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Resolves a configuration record from defaults, an optional file and
/// overrides.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, sets: &[String]) -> Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let from_file: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut value, from_file);
    }
    for set in sets {
        apply(&mut value, set)?;
    }
    serde_json::from_value(value).context("configuration does not match the expected fields")
}

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value replaces what was there.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `dotted.key=value` override. Every key on the path must
/// already exist so typos fail loudly.
pub fn apply(value: &mut Value, set: &str) -> Result<()> {
    let Some((key, raw)) = set.split_once('=') else {
        bail!("override `{set}` is not of the form key=value");
    };
    let mut slot = &mut *value;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => match map.get_mut(part) {
                Some(v) => v,
                None => bail!("unknown configuration key `{key}`"),
            },
            _ => bail!("`{key}` goes through a non-object value"),
        };
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Inner {
        q: u8,
        name: String,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Outer {
        lr: f64,
        inner: Inner,
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"lr": 0.5, "inner": {"q": 3}}"#).unwrap();
        let sets = ["inner.name=abc".to_string(), "lr=2e-4".to_string()];
        let c: Outer = resolve(Some(&path), &sets).unwrap();
        assert_eq!(c, Outer { lr: 2e-4, inner: Inner { q: 3, name: "abc".into() } });
    }

    #[test]
    fn unknown_keys_and_bad_types_fail() {
        assert!(resolve::<Outer>(None, &["inner.nope=1".into()]).is_err());
        assert!(resolve::<Outer>(None, &["lr".into()]).is_err());
        assert!(resolve::<Outer>(None, &["inner.q=300".into()]).is_err());
    }
}
