//! JSON configs with `dotted.path=value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Parses the right-hand side as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Replaces the value at `path`; every segment must already exist.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let prefix = segments[..=i].join(".");
        node = match node {
            Value::Object(map) => map.get_mut(*seg).ok_or_else(|| anyhow!("unknown key '{prefix}'"))?,
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| anyhow!("'{prefix}': expected an array index"))?;
                let len = items.len();
                items.get_mut(idx).ok_or_else(|| anyhow!("'{prefix}': index outside array of {len}"))?
            }
            _ => bail!("'{prefix}': cannot descend into a scalar"),
        };
    }
    *node = value;
    Ok(())
}

/// Loads `file` (or the defaults), applies `KEY=VALUE` overrides and
/// rejects unknown keys at every stage.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, sets: &[String]) -> Result<T> {
    let base: T = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => T::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("override '{s}' is not KEY=VALUE"))?;
        set_path(&mut value, k.trim(), parse_value(v.trim()))?;
    }
    serde_json::from_value(value).context("applying overrides")
}

/// Whether `file` sets `key` at its top level.
pub fn file_has_key(file: Option<&Path>, key: &str) -> Result<bool> {
    let Some(p) = file else { return Ok(false) };
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("config {}", p.display()))?;
    Ok(v.get(key).is_some())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vird_experiment::TrainConfig;

    #[test]
    fn dotted_paths_reach_nested_fields() {
        let sets = [
            "epochs=3".to_string(),
            "model.cepa.d_k=16".to_string(),
            "model.regression.conv_widths.1=8".to_string(),
            "grad_clip=2.5".to_string(),
            "model.interpolation=nearest".to_string(),
        ];
        let c: TrainConfig = resolve(None, &sets).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model.cepa.d_k, 16);
        assert_eq!(c.model.regression.conv_widths, vec![32, 8]);
        assert_eq!(c.grad_clip, Some(2.5));
    }

    #[test]
    fn unknown_or_malformed_overrides_fail() {
        assert!(resolve::<TrainConfig>(None, &["model.cepa.nope=1".into()]).is_err());
        assert!(resolve::<TrainConfig>(None, &["epochs".into()]).is_err());
        assert!(resolve::<TrainConfig>(None, &["epochs=\"many\"".into()]).is_err());
        assert!(resolve::<TrainConfig>(None, &["epochs.x=1".into()]).is_err());
    }
}
