//! Versioned checkpoint container.
//!
//! Layout: `b"MONLCKPT"`, u32 LE version, u64 LE header length, JSON header,
//! then one little-endian f64 array per named section. Sections `weights`
//! and `ema` are always present; training appends optimizer state.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::DenoiserConfig;
use super::params::{DenoiserParams, Layout};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MONLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: DenoiserConfig,
    tensors: Vec<TensorEntry>,
    sections: Vec<String>,
    checksum: u32,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Parameters plus any extra parameter-shaped sections and free-form
/// metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub sections: Vec<(String, Vec<f64>)>,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: DenoiserParams) -> Self {
        Self {
            params,
            sections: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn section(&self, name: &str) -> Option<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let total = self.params.num_params();
        let mut payload = Vec::with_capacity((2 + self.sections.len()) * total * 8);
        let mut names = vec!["weights".to_string(), "ema".to_string()];
        for v in [self.params.weights(), self.params.ema()] {
            payload.extend(v.iter().flat_map(|x| x.to_le_bytes()));
        }
        for (name, v) in &self.sections {
            if v.len() != total {
                return Err(crate::error::shape_err(total, v.len()));
            }
            names.push(name.clone());
            payload.extend(v.iter().flat_map(|x| x.to_le_bytes()));
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.params.config().clone(),
            tensors: self
                .params
                .layout()
                .specs
                .iter()
                .map(|s| TensorEntry {
                    name: s.name.clone(),
                    shape: s.shape,
                })
                .collect(),
            sections: names,
            checksum: crc32fast::hash(&payload),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        header.config.validate()?;
        let layout = Layout::new(&header.config);
        let expected: Vec<TensorEntry> = layout
            .specs
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                shape: s.shape,
            })
            .collect();
        if expected != header.tensors {
            return Err(Error::Format("tensor table disagrees with the stored config".into()));
        }
        let payload = &body[hlen..];
        let total = layout.total;
        if payload.len() != header.sections.len() * total * 8 {
            return Err(Error::Format(format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                header.sections.len() * total * 8
            )));
        }
        let found = crc32fast::hash(payload);
        if found != header.checksum {
            return Err(Error::Checksum {
                expected: header.checksum,
                found,
            });
        }
        let mut arrays: Vec<(String, Vec<f64>)> = header
            .sections
            .iter()
            .zip(payload.chunks_exact(total * 8))
            .map(|(name, chunk)| {
                let v = chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                (name.clone(), v)
            })
            .collect();
        if arrays.len() < 2 || arrays[0].0 != "weights" || arrays[1].0 != "ema" {
            return Err(Error::Format("missing weights/ema sections".into()));
        }
        let rest = arrays.split_off(2);
        let ema = arrays.pop().unwrap().1;
        let weights = arrays.pop().unwrap().1;
        Ok(Self {
            params: DenoiserParams::from_parts(header.config, weights, ema)?,
            sections: rest,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
