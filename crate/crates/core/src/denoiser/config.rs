use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentShape;

/// Shape and capacity of the toy multimodal transformer.
///
/// Desk defaults are 2 layers, width 32 and 4 heads. The reference
/// audiovisual model uses 24 layers and 16 heads at width 1024.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Per-modality latent widths d_m; M is the length.
    pub widths: Vec<usize>,
    /// Time-segments N shared by all modalities.
    pub segments: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `model_dim`.
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    /// Diffusion steps T.
    pub steps: usize,
    /// Width of the sinusoidal timestep features (must be even).
    pub timestep_embed_dim: usize,
    pub self_conditioning: bool,
}

fn default_ff_mult() -> usize {
    4
}

impl DenoiserConfig {
    pub fn desk(widths: Vec<usize>, segments: usize) -> Self {
        Self {
            widths,
            segments,
            model_dim: 32,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            steps: 1000,
            timestep_embed_dim: 32,
            self_conditioning: true,
        }
    }

    pub fn modalities(&self) -> usize {
        self.widths.len()
    }

    pub fn tokens(&self) -> usize {
        self.modalities() * self.segments
    }

    pub fn ff_dim(&self) -> usize {
        self.ff_mult * self.model_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Input width of modality `m`'s projection (doubled by self-conditioning).
    pub fn input_width(&self, m: usize) -> usize {
        if self.self_conditioning {
            2 * self.widths[m]
        } else {
            self.widths[m]
        }
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape {
            segments: self.segments,
            widths: self.widths.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("modality widths must be non-empty and positive: {:?}", self.widths));
        }
        if self.segments == 0 {
            return bad("segments must be >= 1".into());
        }
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.ff_mult == 0 {
            return bad("ff_mult must be >= 1".into());
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.timestep_embed_dim == 0 || !self.timestep_embed_dim.is_multiple_of(2) {
            return bad(format!("timestep_embed_dim {} must be even and positive", self.timestep_embed_dim));
        }
        Ok(())
    }
}
