//! Sample file: `b"MONLSMPL"`, u32 LE version, u64 LE header length, JSON
//! header, then `count` latents as little-endian f64 in flat order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SamplerConfig, Task};
use crate::error::{Error, Result};
use crate::latent::{LatentShape, MultimodalLatent, SegmentMask};

const MAGIC: &[u8; 8] = b"MONLSMPL";
pub const SAMPLE_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleHeader {
    pub version: u32,
    pub shape: LatentShape,
    /// Conditioning mask as M rows of N flags.
    pub mask: Vec<Vec<bool>>,
    pub task: Option<Task>,
    pub seed: u64,
    pub sampler: SamplerConfig,
    /// `None` for the masked sampler, else the baseline name.
    #[serde(default)]
    pub baseline: Option<String>,
    pub count: usize,
    pub checksum: u32,
    /// Free-form provenance (checkpoint, weights, example indices, ...).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleFile {
    pub header: SampleHeader,
    pub samples: Vec<MultimodalLatent>,
}

impl SampleFile {
    /// Fills in version, shape, count and checksum from `samples`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mask: &SegmentMask,
        task: Option<Task>,
        seed: u64,
        sampler: SamplerConfig,
        baseline: Option<String>,
        provenance: serde_json::Value,
        samples: Vec<MultimodalLatent>,
    ) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::InvalidConfig("no samples to write".into()))?;
        let shape = first.shape().clone();
        mask.matches(&shape)?;
        for s in &samples {
            first.ensure_same_shape(s)?;
        }
        let header = SampleHeader {
            version: SAMPLE_FILE_VERSION,
            shape,
            mask: mask.rows(),
            task,
            seed,
            sampler,
            baseline,
            count: samples.len(),
            checksum: crc32fast::hash(&payload(&samples)),
            provenance,
        };
        Ok(Self { header, samples })
    }

    pub fn mask(&self) -> Result<SegmentMask> {
        SegmentMask::from_rows(self.header.mask.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let body = payload(&self.samples);
        let mut out = Vec::with_capacity(20 + json.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SAMPLE_FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a sample file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != SAMPLE_FILE_VERSION {
            return Err(Error::Version {
                expected: SAMPLE_FILE_VERSION,
                found: version,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::Format("truncated header".into()));
        }
        let header: SampleHeader = serde_json::from_slice(&body[..hlen])?;
        let shape = LatentShape::new(header.shape.segments, header.shape.widths.clone())?;
        SegmentMask::from_rows(header.mask.clone())?.matches(&shape)?;
        let data = &body[hlen..];
        let per = shape.numel() * 8;
        if header.count == 0 || data.len() != header.count * per {
            return Err(Error::Format(format!(
                "payload has {} bytes, header implies {} samples of {} bytes",
                data.len(),
                header.count,
                per
            )));
        }
        let found = crc32fast::hash(data);
        if found != header.checksum {
            return Err(Error::Checksum {
                expected: header.checksum,
                found,
            });
        }
        let samples = data
            .chunks_exact(per)
            .map(|chunk| {
                let flat: Vec<f64> = chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                MultimodalLatent::from_flat(&shape, &flat)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { header, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn payload(samples: &[MultimodalLatent]) -> Vec<u8> {
    samples
        .iter()
        .flat_map(|s| s.values().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>())
        .collect()
}
