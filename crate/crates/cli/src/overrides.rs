//! `dotted.key=value` overrides on a JSON config.
//!
//! The key must already exist. The value is parsed as JSON, falling back to a
//! bare string, and must have the same JSON type as the value it replaces;
//! integers may only replace integers. `null` slots (unset optional fields)
//! accept anything and are checked when the config is deserialized.

use serde_json::Value;

use crate::CliError;

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(n) if n.is_u64() || n.is_i64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn compatible(old: &Value, new: &Value) -> bool {
    match (kind(old), kind(new)) {
        ("null", _) => true,
        ("number", "integer") => true,
        (a, b) => a == b,
    }
}

pub fn apply_overrides(config: &mut Value, overrides: &[String]) -> Result<(), CliError> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("override `{o}` is not KEY=VALUE")))?;
        let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut *config;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| CliError::usage(format!("unknown config key `{key}`")))?;
        }
        if !compatible(slot, &new) {
            return Err(CliError::usage(format!(
                "`{key}` expects {}, got {} `{raw}`",
                kind(slot),
                kind(&new)
            )));
        }
        *slot = new;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn replaces_typed_values() {
        let mut v = json!({"adapt": {"iterations": 20, "lr": 0.001, "bn": "batch", "attach_layer": null}});
        let o = ["adapt.iterations=0", "adapt.lr=1", "adapt.bn=running", "adapt.attach_layer=2"].map(String::from);
        apply_overrides(&mut v, &o).unwrap();
        assert_eq!(v, json!({"adapt": {"iterations": 0, "lr": 1, "bn": "running", "attach_layer": 2}}));
    }

    #[test]
    fn rejects_unknown_keys_and_wrong_types() {
        let mut v = json!({"adapt": {"iterations": 20, "lr": 0.001}, "train": {"milestones": [1, 2]}});
        for bad in ["adapt.iters=3", "adapt.iterations=1.5", "adapt.iterations=abc", "adapt.lr=fast", "train.milestones=3", "noequals"] {
            let e = apply_overrides(&mut v, &[bad.to_string()]).unwrap_err();
            assert_eq!(e.exit, crate::EXIT_USAGE, "{bad}");
        }
        apply_overrides(&mut v, &["train.milestones.1=5".to_string()]).unwrap();
        assert_eq!(v["train"]["milestones"], json!([1, 5]));
    }
}
