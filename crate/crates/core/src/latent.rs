//! Multimodal latent sequences and segment masks.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::{normal, Rng};

/// Segment count plus per-modality widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub segments: usize,
    pub widths: Vec<usize>,
}

impl LatentShape {
    pub fn new(segments: usize, widths: Vec<usize>) -> Result<Self> {
        if segments == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "latent needs N >= 1 and at least one modality of width >= 1, got N={segments}, widths={widths:?}"
            )));
        }
        Ok(Self { segments, widths })
    }

    pub fn modalities(&self) -> usize {
        self.widths.len()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.segments * self.widths.iter().sum::<usize>()
    }
}

impl std::fmt::Display for LatentShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "N={} widths={:?}", self.segments, self.widths)
    }
}

/// One sequence per modality, each stored row-major as `N × d_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalLatent {
    shape: LatentShape,
    data: Vec<Vec<f64>>,
}

/// A standard-normal draw congruent with a latent.
pub type NoiseDraw = MultimodalLatent;

impl MultimodalLatent {
    pub fn zeros(shape: &LatentShape) -> Self {
        let data = shape
            .widths
            .iter()
            .map(|w| vec![0.0; w * shape.segments])
            .collect();
        Self {
            shape: shape.clone(),
            data,
        }
    }

    pub fn from_modalities(shape: LatentShape, data: Vec<Vec<f64>>) -> Result<Self> {
        if data.len() != shape.modalities() {
            return Err(shape_err(
                format!("{} modalities", shape.modalities()),
                format!("{} modalities", data.len()),
            ));
        }
        for (m, seq) in data.iter().enumerate() {
            let want = shape.widths[m] * shape.segments;
            if seq.len() != want {
                return Err(shape_err(
                    format!("modality {m} of length {want}"),
                    format!("length {}", seq.len()),
                ));
            }
        }
        Ok(Self { shape, data })
    }

    /// Fills from a flat slice in modality-major, segment-major order.
    pub fn from_flat(shape: &LatentShape, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.numel() {
            return Err(shape_err(shape.numel(), flat.len()));
        }
        let mut data = Vec::with_capacity(shape.modalities());
        let mut off = 0;
        for w in &shape.widths {
            let len = w * shape.segments;
            data.push(flat[off..off + len].to_vec());
            off += len;
        }
        Ok(Self {
            shape: shape.clone(),
            data,
        })
    }

    /// Every scalar drawn from N(0, 1), consumed in flat order.
    pub fn standard_normal(shape: &LatentShape, rng: &mut Rng) -> Self {
        let mut out = Self::zeros(shape);
        for v in out.values_mut() {
            *v = normal(rng);
        }
        out
    }

    pub fn shape(&self) -> &LatentShape {
        &self.shape
    }

    pub fn modalities(&self) -> usize {
        self.shape.modalities()
    }

    pub fn segments(&self) -> usize {
        self.shape.segments
    }

    pub fn width(&self, m: usize) -> usize {
        self.shape.widths[m]
    }

    pub fn modality(&self, m: usize) -> &[f64] {
        &self.data[m]
    }

    pub fn modality_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.data[m]
    }

    #[inline]
    pub fn segment(&self, m: usize, n: usize) -> &[f64] {
        let w = self.shape.widths[m];
        &self.data[m][n * w..(n + 1) * w]
    }

    #[inline]
    pub fn segment_mut(&mut self, m: usize, n: usize) -> &mut [f64] {
        let w = self.shape.widths[m];
        &mut self.data[m][n * w..(n + 1) * w]
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.data.iter().flatten()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.data.iter_mut().flatten()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn ensure_same_shape(&self, other: &MultimodalLatent) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(&self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise combination of two congruent latents.
    pub fn zip_map(&self, other: &MultimodalLatent, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data = self
            .data
            .iter()
            .map(|a| a.iter().map(|&x| f(x)).collect())
            .collect();
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Copies the masked segments of `src` into `self`.
    pub fn copy_masked_from(&mut self, src: &MultimodalLatent, mask: &SegmentMask) {
        for m in 0..self.modalities() {
            for n in 0..self.segments() {
                if mask.get(m, n) {
                    self.segment_mut(m, n).copy_from_slice(src.segment(m, n));
                }
            }
        }
    }
}

/// Boolean M × N mask over (modality, segment) cells. `true` marks a
/// conditioned (clean, given) cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMask {
    modalities: usize,
    segments: usize,
    bits: Vec<bool>,
}

impl SegmentMask {
    pub fn all(value: bool, modalities: usize, segments: usize) -> Self {
        Self {
            modalities,
            segments,
            bits: vec![value; modalities * segments],
        }
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let modalities = rows.len();
        let segments = rows.first().map_or(0, Vec::len);
        if modalities == 0 || segments == 0 || rows.iter().any(|r| r.len() != segments) {
            return Err(Error::InvalidConfig("mask rows must be non-empty and rectangular".into()));
        }
        Ok(Self {
            modalities,
            segments,
            bits: rows.into_iter().flatten().collect(),
        })
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> bool {
        self.bits[m * self.segments + n]
    }

    pub fn set(&mut self, m: usize, n: usize, v: bool) {
        self.bits[m * self.segments + n] = v;
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        self.bits.chunks(self.segments).map(<[bool]>::to_vec).collect()
    }

    pub fn all_true(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn any_true(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self {
            modalities: self.modalities,
            segments: self.segments,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn matches(&self, shape: &LatentShape) -> Result<()> {
        if self.modalities != shape.modalities() || self.segments != shape.segments {
            return Err(shape_err(
                format!("mask {}x{}", shape.modalities(), shape.segments),
                format!("mask {}x{}", self.modalities, self.segments),
            ));
        }
        Ok(())
    }
}
