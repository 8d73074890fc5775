//! Synthetic two-modality latents with a known cross-modal law.
//!
//! Modality 1 is a sum of two random sinusoids per example, embedded to `d1`
//! channels by a fixed random projection. Modality 2 is a fixed linear map of
//! modality 1 delayed by `lag` segments (circularly), plus observation noise.
//! Both modalities are then normalised by one global mean and variance each.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentShape, MultimodalLatent};
use crate::rng::{label, normal, stream, Rng};

const MAGIC: &[u8; 8] = b"MONLDATA";
pub const DATASET_VERSION: u32 = 1;
const FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledConfig {
    pub segments: usize,
    pub d1: usize,
    pub d2: usize,
    /// Sinusoid frequencies, in cycles per `segments`.
    pub freq_range: [f64; 2],
    pub amp_range: [f64; 2],
    pub lag: usize,
    pub sigma_obs: f64,
}

impl Default for CoupledConfig {
    fn default() -> Self {
        Self {
            segments: 8,
            d1: 4,
            d2: 6,
            freq_range: [0.5, 2.0],
            amp_range: [0.5, 1.5],
            lag: 1,
            sigma_obs: 0.05,
        }
    }
}

impl CoupledConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.segments == 0 || self.d1 == 0 || self.d2 == 0 {
            return bad("segments, d1 and d2 must be >= 1".into());
        }
        if self.lag >= self.segments {
            return bad(format!("lag {} must be < segments {}", self.lag, self.segments));
        }
        if !(self.sigma_obs >= 0.0 && self.sigma_obs.is_finite()) {
            return bad(format!("sigma_obs must be >= 0, got {}", self.sigma_obs));
        }
        for (name, [lo, hi]) in [("freq_range", self.freq_range), ("amp_range", self.amp_range)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> LatentShape {
        LatentShape {
            segments: self.segments,
            widths: vec![self.d1, self.d2],
        }
    }
}

/// The fixed maps shared by every example of a seeded dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledLaw {
    /// `d1 × 4`, row-major.
    pub projection: Vec<f64>,
    /// `d2 × d1`, row-major.
    pub coupling: Vec<f64>,
    d1: usize,
    d2: usize,
}

impl CoupledLaw {
    pub fn new(cfg: &CoupledConfig, seed: u64) -> Self {
        let mut rng = stream(seed, &[label::DATA_LAW]);
        let projection = (0..cfg.d1 * FEATURES).map(|_| 0.5 * normal(&mut rng)).collect();
        let scale = 1.0 / (cfg.d1 as f64).sqrt();
        let coupling = (0..cfg.d2 * cfg.d1).map(|_| scale * normal(&mut rng)).collect();
        Self {
            projection,
            coupling,
            d1: cfg.d1,
            d2: cfg.d2,
        }
    }

    /// `C · x` for one modality-1 segment.
    pub fn couple(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d2)
            .map(|i| (0..self.d1).map(|j| self.coupling[i * self.d1 + j] * x[j]).sum())
            .collect()
    }

    /// Noise-free modality 2 for a raw modality-1 track.
    pub fn predict_modality2(&self, m1: &[f64], segments: usize, lag: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(segments * self.d2);
        for n in 0..segments {
            let src = (n + segments - lag) % segments;
            out.extend(self.couple(&m1[src * self.d1..(src + 1) * self.d1]));
        }
        out
    }
}

/// Per-modality scalar normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    fn std(&self, m: usize) -> f64 {
        let s = self.var[m].sqrt();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: CoupledConfig,
    pub seed: u64,
    pub stats: NormStats,
    /// The first `n_train` examples are the training split, the rest are
    /// held out.
    pub n_train: usize,
    pub examples: Vec<MultimodalLatent>,
}

impl Dataset {
    pub fn train(&self) -> &[MultimodalLatent] {
        &self.examples[..self.n_train]
    }

    pub fn eval(&self) -> &[MultimodalLatent] {
        &self.examples[self.n_train..]
    }

    pub fn with_split(mut self, n_train: usize) -> Result<Self> {
        if n_train > self.examples.len() {
            return Err(Error::InvalidConfig(format!(
                "train split {n_train} exceeds {} examples",
                self.examples.len()
            )));
        }
        self.n_train = n_train;
        Ok(self)
    }

    pub fn law(&self) -> CoupledLaw {
        CoupledLaw::new(&self.config, self.seed)
    }

    /// Undoes the normalisation.
    pub fn denormalize(&self, x: &MultimodalLatent) -> MultimodalLatent {
        let mut out = x.clone();
        for m in 0..out.modalities() {
            let (mu, sd) = (self.stats.mean[m], self.stats.std(m));
            out.modality_mut(m).iter_mut().for_each(|v| *v = *v * sd + mu);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: Vec<u8> = self
            .examples
            .iter()
            .flat_map(|e| e.values().flat_map(|&v| (v as f32).to_le_bytes()).collect::<Vec<_>>())
            .collect();
        let header = Header {
            version: DATASET_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            stats: self.stats.clone(),
            shape: self.config.shape(),
            count: self.examples.len(),
            n_train: self.n_train,
            checksum: crc32fast::hash(&payload),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::Version {
                expected: DATASET_VERSION,
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
        if header.shape != header.config.shape() {
            return Err(Error::Format(format!(
                "header shape {} disagrees with config {}",
                header.shape,
                header.config.shape()
            )));
        }
        if header.n_train > header.count || header.stats.mean.len() != 2 || header.stats.var.len() != 2 {
            return Err(Error::Format("inconsistent split or statistics".into()));
        }
        let per = header.shape.numel() * 4;
        let payload = &body[hlen..];
        if payload.len() != header.count * per {
            return Err(Error::Format(format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                header.count * per
            )));
        }
        let found = crc32fast::hash(payload);
        if found != header.checksum {
            return Err(Error::Checksum {
                expected: header.checksum,
                found,
            });
        }
        let examples = payload
            .chunks_exact(per)
            .map(|c| {
                let flat: Vec<f64> = c
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect();
                MultimodalLatent::from_flat(&header.shape, &flat)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: header.config,
            seed: header.seed,
            stats: header.stats,
            n_train: header.n_train,
            examples,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: CoupledConfig,
    seed: u64,
    stats: NormStats,
    shape: LatentShape,
    count: usize,
    n_train: usize,
    checksum: u32,
}

/// Raw (unnormalised) example `index` of the seeded law.
pub fn raw_example(cfg: &CoupledConfig, law: &CoupledLaw, seed: u64, index: u64) -> MultimodalLatent {
    let mut rng = stream(seed, &[label::DATA_EXAMPLE, index]);
    let n = cfg.segments;
    let mut waves = [(0.0, 0.0, 0.0); 2];
    for w in &mut waves {
        let f = uniform(&mut rng, cfg.freq_range);
        let phase = rng.random::<f64>() * 2.0 * PI;
        let amp = uniform(&mut rng, cfg.amp_range);
        *w = (2.0 * PI * f / n as f64, phase, amp);
    }
    let mut m1 = Vec::with_capacity(n * cfg.d1);
    for s in 0..n {
        let mut feat = [0.0; FEATURES];
        for (k, &(omega, phase, amp)) in waves.iter().enumerate() {
            let arg = omega * s as f64 + phase;
            feat[2 * k] = amp * arg.sin();
            feat[2 * k + 1] = amp * arg.cos();
        }
        for i in 0..cfg.d1 {
            m1.push((0..FEATURES).map(|j| law.projection[i * FEATURES + j] * feat[j]).sum());
        }
    }
    let mut m2 = law.predict_modality2(&m1, n, cfg.lag);
    for v in &mut m2 {
        *v += cfg.sigma_obs * normal(&mut rng);
    }
    MultimodalLatent::from_modalities(cfg.shape(), vec![m1, m2]).expect("shape follows config")
}

fn uniform(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Generates `n_examples` normalised examples (all in the training split),
/// stored at f32 precision.
pub fn gen_coupled(cfg: &CoupledConfig, n_examples: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n_examples == 0 {
        return Err(Error::InvalidConfig("need at least one example".into()));
    }
    let law = CoupledLaw::new(cfg, seed);
    let mut examples: Vec<MultimodalLatent> = (0..n_examples as u64)
        .map(|i| raw_example(cfg, &law, seed, i))
        .collect();

    let mut stats = NormStats {
        mean: vec![0.0; 2],
        var: vec![0.0; 2],
    };
    for m in 0..2 {
        let count = (n_examples * cfg.segments * if m == 0 { cfg.d1 } else { cfg.d2 }) as f64;
        let mean = examples.iter().flat_map(|e| e.modality(m)).sum::<f64>() / count;
        let var = examples
            .iter()
            .flat_map(|e| e.modality(m))
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / count;
        stats.mean[m] = mean;
        stats.var[m] = var;
    }
    for e in &mut examples {
        for m in 0..2 {
            let (mu, sd) = (stats.mean[m], stats.std(m));
            e.modality_mut(m)
                .iter_mut()
                .for_each(|v| *v = ((*v - mu) / sd) as f32 as f64);
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        stats,
        n_train: n_examples,
        examples,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = ds.to_bytes()?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}
