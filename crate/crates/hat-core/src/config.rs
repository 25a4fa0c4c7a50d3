//! Run configuration: a JSON document with a `kind` discriminator selecting
//! either a single-stage description or a registry variant. Unknown fields
//! are rejected so typos fail loudly; geometry invariants are validated by
//! name before anything is built.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hat::StageGeometry;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub feature_size: usize,
    pub window_size: usize,
    #[serde(default = "default_carrier_tokens")]
    pub carrier_tokens: usize,
    pub channels: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_bias_hidden")]
    pub bias_hidden: usize,
}

fn default_carrier_tokens() -> usize {
    4
}
fn default_heads() -> usize {
    1
}
fn default_depth() -> usize {
    1
}
fn default_eps() -> f64 {
    1e-5
}
fn default_bias_hidden() -> usize {
    64
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let geom = self.geometry()?;
        geom.validate()?;
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(
                "heads_divide_channels",
                format!("{} heads do not divide {} channels", self.heads, self.channels),
            ));
        }
        if self.depth == 0 {
            return Err(Error::config("positive_depth", "depth must be at least 1".to_string()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<StageGeometry> {
        StageGeometry::new(self.feature_size, self.window_size, self.carrier_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    #[serde(default = "default_width_div")]
    pub width_div: usize,
}

fn default_width_div() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunConfig {
    Stage(StageConfig),
    Variant(VariantConfig),
}

/// Parses a config document, dispatching on its `kind` field.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut doc: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("config is not valid JSON: {e}")))?;
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| Error::Format("config root must be a JSON object".to_string()))?;
    let kind = obj
        .remove("kind")
        .ok_or_else(|| Error::Format("config needs a \"kind\" field (\"stage\" or \"variant\")".to_string()))?;
    let kind = kind
        .as_str()
        .ok_or_else(|| Error::Format("\"kind\" must be a string".to_string()))?
        .to_string();
    let rest = serde_json::Value::Object(obj.clone());
    match kind.as_str() {
        "stage" => {
            let cfg: StageConfig = serde_json::from_value(rest)
                .map_err(|e| Error::Format(format!("bad stage config: {e}")))?;
            cfg.validate()?;
            Ok(RunConfig::Stage(cfg))
        }
        "variant" => {
            let cfg: VariantConfig = serde_json::from_value(rest)
                .map_err(|e| Error::Format(format!("bad variant config: {e}")))?;
            crate::model::variant(&cfg.name)?;
            if cfg.width_div == 0 {
                return Err(Error::config(
                    "width_divides_channels",
                    "width_div must be positive".to_string(),
                ));
            }
            Ok(RunConfig::Variant(cfg))
        }
        other => Err(Error::Format(format!(
            "unknown config kind {other:?}; expected \"stage\" or \"variant\""
        ))),
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Built-in stage configurations.
pub fn preset(name: &str) -> Option<StageConfig> {
    match name {
        // Small enough for exhaustive finite-difference checking, large
        // enough that every code path (carriers, multiple heads) is active.
        "hat-small" => Some(StageConfig {
            feature_size: 14,
            window_size: 7,
            carrier_tokens: 4,
            channels: 8,
            heads: 2,
            depth: 1,
            eps: 1e-5,
            bias_hidden: 64,
        }),
        _ => None,
    }
}

pub const PRESETS: [&str; 1] = ["hat-small"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_config_with_defaults() {
        let cfg = parse_config(r#"{"kind":"stage","feature_size":14,"window_size":7,"channels":8}"#).unwrap();
        match cfg {
            RunConfig::Stage(s) => {
                assert_eq!(s.carrier_tokens, 4);
                assert_eq!(s.heads, 1);
                assert_eq!(s.depth, 1);
                assert_eq!(s.eps, 1e-5);
            }
            _ => panic!("expected stage config"),
        }
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = parse_config(r#"{"kind":"stage","feature_size":14,"window_size":7,"channels":8,"wibble":1}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("wibble"), "{err}");
    }

    #[test]
    fn violated_invariants_are_named() {
        let cases = [
            (
                r#"{"kind":"stage","feature_size":15,"window_size":7,"channels":8}"#,
                "window_size_divides_feature_size",
            ),
            (
                r#"{"kind":"stage","feature_size":14,"window_size":7,"channels":8,"carrier_tokens":5}"#,
                "carrier_tokens_square",
            ),
            (
                r#"{"kind":"stage","feature_size":8,"window_size":2,"channels":8,"carrier_tokens":9}"#,
                "carrier_tokens_at_most_window_tokens",
            ),
            (
                r#"{"kind":"stage","feature_size":14,"window_size":7,"channels":8,"heads":3}"#,
                "heads_divide_channels",
            ),
        ];
        for (text, invariant) in cases {
            let err = parse_config(text).unwrap_err();
            assert_eq!(err.invariant_name(), Some(invariant), "for {text}");
        }
    }

    #[test]
    fn variant_config_resolves_registry_names() {
        let cfg = parse_config(r#"{"kind":"variant","name":"faster_vit_2","width_div":8}"#).unwrap();
        assert_eq!(cfg, RunConfig::Variant(VariantConfig { name: "faster_vit_2".into(), width_div: 8 }));
        assert!(parse_config(r#"{"kind":"variant","name":"nope"}"#).is_err());
    }

    #[test]
    fn missing_kind_and_bad_kind_fail() {
        assert!(parse_config(r#"{"feature_size":14}"#).is_err());
        assert!(parse_config(r#"{"kind":"model"}"#).is_err());
        assert!(parse_config("[]").is_err());
        assert!(parse_config("not json").is_err());
    }

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
        assert!(preset("hat-enormous").is_none());
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = preset("hat-small").unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: StageConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
