//! Flat parameter storage with a named tensor layout.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::config::DenoiserConfig;
use crate::error::Result;
use crate::rng::{normal, Rng};

/// A contiguous `rows × cols` region of the flat parameter vector.
/// Weight matrices are stored `in × out`, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.off..self.off + self.len()
    }

    #[inline]
    pub fn of<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.range()]
    }

    #[inline]
    pub fn of_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.range()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// N(0, 1/rows): fan-in scaled.
    FanIn,
    /// N(0, 0.02²).
    Embedding,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub init: Init,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub struct ModalityBlocks {
    pub in_w: Block,
    pub in_b: Block,
    pub out_w: Block,
    pub out_b: Block,
    /// N × d learned temporal positions.
    pub pos: Block,
}

#[derive(Clone, Debug)]
pub struct LayerBlocks {
    /// Conditioning → [shift1, scale1, gate1, shift2, scale2, gate2].
    pub ada_w: Block,
    pub ada_b: Block,
    pub qkv_w: Block,
    pub qkv_b: Block,
    pub o_w: Block,
    pub o_b: Block,
    pub ff1_w: Block,
    pub ff1_b: Block,
    pub ff2_w: Block,
    pub ff2_b: Block,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    pub total: usize,
    pub modality: Vec<ModalityBlocks>,
    /// M × d modality embeddings.
    pub modality_emb: Block,
    pub t_w1: Block,
    pub t_b1: Block,
    pub t_w2: Block,
    pub t_b2: Block,
    pub layers: Vec<LayerBlocks>,
    /// Conditioning → [shift, scale] for the output norm.
    pub final_w: Block,
    pub final_b: Block,
}

struct Builder {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: String, rows: usize, cols: usize, init: Init, decay: bool) -> Block {
        let block = Block {
            off: self.total,
            rows,
            cols,
        };
        self.specs.push(TensorSpec {
            name,
            shape: [rows, cols],
            offset: self.total,
            init,
            decay,
        });
        self.total += rows * cols;
        block
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> Block {
        self.push(name, rows, cols, Init::FanIn, true)
    }

    fn bias(&mut self, name: String, cols: usize) -> Block {
        self.push(name, 1, cols, Init::Zero, false)
    }
}

impl Layout {
    pub fn new(cfg: &DenoiserConfig) -> Self {
        let d = cfg.model_dim;
        let mut b = Builder {
            specs: Vec::new(),
            total: 0,
        };
        let modality = (0..cfg.modalities())
            .map(|m| ModalityBlocks {
                in_w: b.weight(format!("modality.{m}.in_proj.weight"), cfg.input_width(m), d),
                in_b: b.bias(format!("modality.{m}.in_proj.bias"), d),
                out_w: b.weight(format!("modality.{m}.out_proj.weight"), d, cfg.widths[m]),
                out_b: b.bias(format!("modality.{m}.out_proj.bias"), cfg.widths[m]),
                pos: b.push(format!("modality.{m}.pos_emb"), cfg.segments, d, Init::Embedding, false),
            })
            .collect();
        let modality_emb = b.push("modality_emb".into(), cfg.modalities(), d, Init::Embedding, false);
        let t_w1 = b.weight("t_embed.fc1.weight".into(), cfg.timestep_embed_dim, d);
        let t_b1 = b.bias("t_embed.fc1.bias".into(), d);
        let t_w2 = b.weight("t_embed.fc2.weight".into(), d, d);
        let t_b2 = b.bias("t_embed.fc2.bias".into(), d);
        let f = cfg.ff_dim();
        let layers = (0..cfg.layers)
            .map(|l| LayerBlocks {
                ada_w: b.push(format!("layer.{l}.adaln.weight"), d, 6 * d, Init::Zero, true),
                ada_b: b.push(format!("layer.{l}.adaln.bias"), 1, 6 * d, Init::Zero, false),
                qkv_w: b.weight(format!("layer.{l}.attn.qkv.weight"), d, 3 * d),
                qkv_b: b.bias(format!("layer.{l}.attn.qkv.bias"), 3 * d),
                o_w: b.weight(format!("layer.{l}.attn.out.weight"), d, d),
                o_b: b.bias(format!("layer.{l}.attn.out.bias"), d),
                ff1_w: b.weight(format!("layer.{l}.ff.fc1.weight"), d, f),
                ff1_b: b.bias(format!("layer.{l}.ff.fc1.bias"), f),
                ff2_w: b.weight(format!("layer.{l}.ff.fc2.weight"), f, d),
                ff2_b: b.bias(format!("layer.{l}.ff.fc2.bias"), d),
            })
            .collect();
        let final_w = b.push("final.adaln.weight".into(), d, 2 * d, Init::Zero, true);
        let final_b = b.push("final.adaln.bias".into(), 1, 2 * d, Init::Zero, false);
        Layout {
            specs: b.specs,
            total: b.total,
            modality,
            modality_emb,
            t_w1,
            t_b1,
            t_w2,
            t_b2,
            layers,
            final_w,
            final_b,
        }
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// 1.0 for tensors under weight decay, 0.0 otherwise.
    pub fn decay_mask(&self) -> Vec<f64> {
        let mut mask = vec![0.0; self.total];
        for s in self.specs.iter().filter(|s| s.decay) {
            mask[s.offset..s.offset + s.shape[0] * s.shape[1]].fill(1.0);
        }
        mask
    }
}

/// Which copy of the weights a model view reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum WeightSet {
    Raw,
    #[default]
    Ema,
}

/// All learnable weights of the denoiser plus their EMA shadow.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    layout: Layout,
    weights: Vec<f64>,
    ema: Vec<f64>,
}

/// Draws fresh weights. AdaLN modulation maps start at zero so every block
/// is initially the identity on its residual stream.
pub fn init_denoiser(config: &DenoiserConfig, rng: &mut Rng) -> Result<DenoiserParams> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut weights = vec![0.0; layout.total];
    for spec in &layout.specs {
        let slice = &mut weights[spec.offset..spec.offset + spec.shape[0] * spec.shape[1]];
        let std = match spec.init {
            Init::FanIn => 1.0 / (spec.shape[0] as f64).sqrt(),
            Init::Embedding => 1.0,
            Init::Zero => continue,
        };
        for w in slice.iter_mut() {
            *w = std * normal(rng);
        }
    }
    let ema = weights.clone();
    Ok(DenoiserParams {
        config: config.clone(),
        layout,
        weights,
        ema,
    })
}

impl DenoiserParams {
    pub fn from_parts(config: DenoiserConfig, weights: Vec<f64>, ema: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if weights.len() != layout.total || ema.len() != layout.total {
            return Err(crate::error::shape_err(
                format!("{} parameters", layout.total),
                format!("{} weights / {} ema", weights.len(), ema.len()),
            ));
        }
        Ok(Self {
            config,
            layout,
            weights,
            ema,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    pub fn ema_mut(&mut self) -> &mut [f64] {
        &mut self.ema
    }

    /// Both weight copies, for EMA updates.
    pub fn weights_and_ema_mut(&mut self) -> (&[f64], &mut [f64]) {
        (&self.weights, &mut self.ema)
    }

    pub fn set(&self, which: WeightSet) -> &[f64] {
        match which {
            WeightSet::Raw => &self.weights,
            WeightSet::Ema => &self.ema,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .spec(name)
            .map(|s| &self.weights[s.offset..s.offset + s.shape[0] * s.shape[1]])
    }

    /// Adds N(0, std²) noise to every raw weight (including the zero-initialised
    /// modulation maps) and resets the EMA copy to match.
    pub fn jitter(&mut self, std: f64, rng: &mut Rng) {
        for w in &mut self.weights {
            *w += std * normal(rng);
        }
        self.ema.copy_from_slice(&self.weights);
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.ema).all(|w| w.is_finite())
    }
}
