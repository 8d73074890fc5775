//! Toy multimodal diffusion transformer: joint noise prediction conditioned
//! per token on the timestep vector through adaptive layer norm.

mod checkpoint;
mod config;
mod model;
pub(crate) mod ops;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::DenoiserConfig;
pub use model::{denoise, ConditioningEmbedding, Denoiser, ForwardCache};
pub use params::{init_denoiser, Block, DenoiserParams, Init, Layout, TensorSpec, WeightSet};

#[cfg(test)]
mod tests;
