//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   b"GCDETCKP"
//! version  u32       CHECKPOINT_VERSION
//! hlen     u64       byte length of the JSON header
//! header   hlen      UTF-8 JSON, see `Header`
//! payload  ...       f64 values of every array, in header order
//! ```
//!
//! The header carries `format`, `version`, the detector `config` echo, a
//! free-form `meta` object, and `arrays`: a list of `{name, shape, kind}`
//! entries. Model arrays use the dotted parameter names of the detector
//! (e.g. `neck.gc0.conv_mask.weight`); optimizer state is stored under
//! `optimizer.momentum.<param name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::ParamKind;
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GCDETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "gcdet-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DetectorConfig,
    pub arrays: Vec<NamedArray>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: DetectorConfig,
    #[serde(default)]
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT_NAME.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    kind: a.kind,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let total: usize = self.arrays.iter().map(|a| a.values.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * total);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a gcdet checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.format != FORMAT_NAME {
            return Err(corrupt(format!("unexpected format `{}`", header.format)));
        }
        let mut payload = &body[hlen..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let len: usize = e.shape.iter().product();
            if payload.len() < 8 * len {
                return Err(corrupt(format!("payload truncated in `{}`", e.name)));
            }
            let values = payload[..8 * len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[8 * len..];
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                kind: e.kind,
                values,
            });
        }
        if !payload.is_empty() {
            return Err(corrupt(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self {
            config: header.config,
            arrays,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl<T: Scalar> Detector<T> {
    /// Snapshot of the configuration and every model array (including
    /// batch-norm running statistics).
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            arrays: self
                .all_params()
                .into_iter()
                .map(|(name, p)| NamedArray {
                    name,
                    shape: p.shape.clone(),
                    kind: p.kind,
                    values: p.value.iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
            meta: serde_json::Value::Null,
        }
    }

    /// Rebuilds a detector from the checkpoint's own configuration.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut det = Self::new(ck.config.clone(), 0)?;
        det.load_weights(ck)?;
        Ok(det)
    }

    /// Loads a checkpoint that must have been written for `expected`.
    pub fn load_expecting(path: &Path, expected: &DetectorConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if &ck.config != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {:?} does not match requested {:?}",
                ck.config, expected
            )));
        }
        Self::from_checkpoint(&ck)
    }

    pub fn load_weights(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.config != self.cfg {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {:?} does not match detector {:?}",
                ck.config, self.cfg
            )));
        }
        for (name, p) in self.all_params_mut() {
            let a = ck
                .array(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks array `{name}`")))?;
            if a.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "array `{name}` has shape {:?}, detector expects {:?}",
                    a.shape, p.shape
                )));
            }
            for (dst, &v) in p.value.iter_mut().zip(&a.values) {
                *dst = T::of(v);
            }
        }
        Ok(())
    }
}
