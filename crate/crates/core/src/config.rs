//! The merged run configuration: one section per module, loaded from JSON
//! and patched by flat `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::cdn::CdnConfig;
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::losses::LossConfig;
use crate::model::ModelSpec;
use crate::psa::PsaConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Manifest JSON; relative image paths resolve against its directory.
    pub manifest: String,
    /// Directory (under the manifest root) holding part-label PNGs.
    pub part_dir: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            manifest: String::new(),
            part_dir: "parts".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub cdn: CdnConfig,
    pub psa: PsaConfig,
    pub losses: LossConfig,
    pub trainer: TrainConfig,
    pub evaluator: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.cdn.validate()?;
        self.psa.validate()?;
        self.losses.validate()?;
        self.trainer.validate()?;
        self.evaluator.validate()?;
        Ok(())
    }

    /// Applies `section.key=value` (dots nest further). The value is parsed
    /// as JSON when possible and taken as a string otherwise.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let path: Vec<&str> = key.trim().split('.').collect();
        let mut node = &mut tree;
        for (depth, part) in path.iter().enumerate() {
            let map = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("`{key}`: `{}` is not a section", path[..depth].join("."))))?;
            node = map
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        if node.is_object() {
            return Err(Error::Config(format!("`{key}` is a section, not a value")));
        }
        let raw = raw.trim();
        *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    /// SHA-256 of the compact JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn model_spec(&self, num_identities: usize) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone.clone(),
            cdn: self.cdn.clone(),
            psa: self.psa.clone(),
            ablation: self.trainer.ablation,
            num_identities,
        }
    }

    /// Every leaf key with its default, one `key = value` per line.
    pub fn documented_defaults() -> Vec<(String, String)> {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
            match v {
                Value::Object(map) => {
                    for (k, child) in map {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                leaf => out.push((prefix.to_string(), leaf.to_string())),
            }
        }
        let mut out = Vec::new();
        walk("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut out);
        out
    }
}
