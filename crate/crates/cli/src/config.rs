//! Training configuration from a TOML file plus `key=value` overrides.
//!
//! Files may be flat (`"encoder.mid_dim" = 32`) or structured
//! (`[encoder]` then `mid_dim = 32`); both flatten to the same dotted keys.

use std::path::Path;

use convsplat_core::TrainConfig;

use crate::error::CliError;

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<(), CliError> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let text = match v {
            toml::Value::Table(t) => {
                flatten(&key, t, out)?;
                continue;
            }
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => {
                return Err(CliError::Usage(format!(
                    "config key {key}: unsupported value {other}"
                )))
            }
        };
        out.push((key, text));
    }
    Ok(())
}

/// Dotted `(key, value)` pairs of a TOML document, in file order.
pub fn parse_toml(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("config file: {e}")))?;
    let mut out = Vec::new();
    flatten("", &table, &mut out)?;
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Applies the config file, then the overrides, on top of `base`.
/// Unknown keys are usage errors.
pub fn resolve(
    mut base: TrainConfig,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<TrainConfig, CliError> {
    let mut pairs = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        pairs.extend(parse_toml(&text)?);
    }
    for o in overrides {
        pairs.push(parse_override(o)?);
    }
    for (k, v) in &pairs {
        base.set(k, v).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(base)
}

/// Keys that fix tensor shapes and cannot change on resume.
pub fn is_structural(key: &str) -> bool {
    key.starts_with("encoder.") || key == "per_channel"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_structured_agree() {
        let flat = parse_toml("lr = 0.01\n\"encoder.mid_dim\" = 8\n").unwrap();
        let nested = parse_toml("lr = 0.01\n[encoder]\nmid_dim = 8\n").unwrap();
        assert_eq!(flat, nested);
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "learning_rate = 0.1\n").unwrap();
        let e = resolve(TrainConfig::desk(), Some(&p), &[]).unwrap_err();
        assert!(matches!(e, CliError::Usage(m) if m.contains("learning_rate")));
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[adam]\nbeta1 = 0.8\n").unwrap();
        let c = resolve(TrainConfig::desk(), Some(&p), &["adam.beta1=0.7".into(), "seed=4".into()]).unwrap();
        assert_eq!((c.adam.beta1, c.seed), (0.7, 4));
        assert!(parse_override("lr").is_err());
    }
}
