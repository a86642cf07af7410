//! Versioned JSON config with `key=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};

use ptinv::model::VaeConfig;

pub const CONFIG_VERSION: u64 = 1;

/// Defaults, then the file (if any), then each override in order.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<VaeConfig> {
    let mut v = serde_json::to_value(VaeConfig::default())?;
    if let Some(p) = file {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let mut f: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let obj = f
            .as_object_mut()
            .with_context(|| format!("{}: config must be a JSON object", p.display()))?;
        match obj.remove("version") {
            Some(Value::Number(n)) if n.as_u64() == Some(CONFIG_VERSION) => {}
            Some(other) => bail!("{}: unsupported config version {other}", p.display()),
            None => bail!("{}: config lacks \"version\"", p.display()),
        }
        merge(&mut v, f);
    }
    for o in overrides {
        let (key, raw) = o.split_once('=').with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut v, key, value).with_context(|| format!("override `{o}`"))?;
    }
    let cfg: VaeConfig = serde_json::from_value(v).context("resolved config")?;
    cfg.arch.validate()?;
    cfg.loss.validate()?;
    Ok(cfg)
}

fn merge(into: &mut Value, from: Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = cur.as_object_mut().context("not an object")?;
        if !obj.contains_key(*part) {
            bail!("unknown key `{}`", parts[..=i].join("."));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    unreachable!("split yields at least one part")
}
