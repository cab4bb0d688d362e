use anyhow::{anyhow, bail, Context, Result};
use serde_json::Value;

/// Applies `key=value` assignments to a JSON object. Keys may be dotted
/// (`crf.w1`); values are parsed as JSON and fall back to a plain string.
pub fn apply(doc: &mut Value, assignments: &[String]) -> Result<()> {
    for a in assignments {
        let (key, raw) = a
            .split_once('=')
            .ok_or_else(|| anyhow!("override {a:?} is not of the form key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set(doc, key, value).with_context(|| format!("applying override {a:?}"))?;
    }
    Ok(())
}

fn set(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!("empty path segment in {key:?}");
        }
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just created")
            }
            _ => bail!("{key:?}: {} is not an object", parts[..i].join(".")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}
