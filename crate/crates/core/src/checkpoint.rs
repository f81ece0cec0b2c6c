//! Versioned binary container of named f64 arrays with a JSON header.
//!
//! Layout: `MAGIC` (8 bytes), format version (u32 LE), header length (u64 LE),
//! header JSON, then every array's values as little-endian f64 in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CCREIDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    fingerprint: String,
    num_identities: usize,
    /// Completed epochs.
    epoch: usize,
    /// Completed optimizer steps.
    step: usize,
    arrays: Vec<ArrayEntry>,
}

/// Adam moments, one entry per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let z: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m: z.clone(), v: z }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub num_identities: usize,
    pub epoch: usize,
    pub step: usize,
    pub params: ParamStore,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::new();
        let mut tensors: Vec<&Tensor> = Vec::new();
        for (kind, list) in [("param", None), ("adam_m", Some(&self.adam.m)), ("adam_v", Some(&self.adam.v))] {
            for (i, (name, t)) in self.params.iter().enumerate() {
                let t = list.map_or(t, |l| &l[i]);
                arrays.push(ArrayEntry {
                    name: format!("{kind}/{name}"),
                    shape: t.shape().to_vec(),
                });
                tensors.push(t);
            }
        }
        let header = Header {
            config: self.config.clone(),
            fingerprint: self.fingerprint(),
            num_identities: self.num_identities,
            epoch: self.epoch,
            step: self.step,
            arrays,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * tensors.iter().map(|t| t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.fingerprint != header.config.fingerprint() {
            return Err(bad("config fingerprint does not match the stored config"));
        }
        let mut data = &body[hlen..];
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for entry in &header.arrays {
            let n: usize = entry.shape.iter().product();
            let raw = data
                .get(..8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("array `{}` truncated", entry.name)))?;
            data = &data[8 * n..];
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_shape_vec(entry.shape.clone(), values).expect("shape matches length");
            match entry.name.split_once('/') {
                Some(("param", name)) => {
                    params.insert(name, t);
                }
                Some(("adam_m", _)) => m.push(t),
                Some(("adam_v", _)) => v.push(t),
                _ => return Err(Error::Checkpoint(format!("unknown array `{}`", entry.name))),
            }
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after the last array"));
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(bad("optimizer state does not cover every parameter"));
        }
        Ok(Checkpoint {
            config: header.config,
            num_identities: header.num_identities,
            epoch: header.epoch,
            step: header.step,
            params,
            adam: AdamState { m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Replaces every `backbone.*` parameter of `params` with the one stored at `path`.
pub fn load_pretrained_backbone(path: &Path, params: &mut ParamStore) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    let ids: Vec<_> = params.ids().filter(|&id| params.name(id).starts_with("backbone.")).collect();
    for id in ids {
        let name = params.name(id).to_string();
        let src = ck
            .params
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("pretrained weights lack `{name}`")))?;
        if src.shape() != params.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "pretrained `{name}` has shape {:?}, expected {:?}",
                src.shape(),
                params.value(id).shape()
            )));
        }
        *params.value_mut(id) = src.clone();
    }
    Ok(())
}
