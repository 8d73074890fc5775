//! Multimodal diffusion with a mixture of noise levels.
//!
//! A single denoiser is trained with per-modality, per-segment diffusion
//! timesteps. At inference the same network performs joint generation,
//! cross-modal generation, continuation and interpolation by choosing which
//! cells of the timestep vector are held at zero (clean, conditioned).

pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod forward;
pub mod latent;
pub mod predictor;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
pub use latent::{LatentShape, MultimodalLatent, NoiseDraw, SegmentMask};
pub use schedule::{NoiseSchedule, StrategyKind, TimestepVector};
