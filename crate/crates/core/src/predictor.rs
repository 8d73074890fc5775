//! The noise-prediction interface shared by the learned denoiser and the
//! analytic Gaussian oracle.

use crate::error::Result;
use crate::latent::MultimodalLatent;
use crate::schedule::{NoiseSchedule, TimestepVector};

/// Clamp applied to self-conditioning clean-data estimates. At large t the
/// division by sqrt(ᾱ) amplifies prediction error by up to ~150×.
pub const CLEAN_ESTIMATE_CLIP: f64 = 5.0;

pub trait NoisePredictor {
    /// ε̂(z_t, t). `self_cond` is ignored by predictors that do not use it;
    /// `None` means an all-zero estimate.
    fn predict(
        &self,
        z_t: &MultimodalLatent,
        tvec: &TimestepVector,
        self_cond: Option<&MultimodalLatent>,
    ) -> Result<MultimodalLatent>;

    fn uses_self_conditioning(&self) -> bool {
        false
    }
}

/// A predictor that can pull a cotangent back to its noisy input.
pub trait DifferentiablePredictor: NoisePredictor {
    /// Evaluates ε̂, asks `upstream` for ∂L/∂ε̂ given ε̂, and returns
    /// `(ε̂, (∂ε̂/∂z_t)ᵀ ∂L/∂ε̂)`. The self-conditioning input is a constant.
    fn predict_vjp(
        &self,
        z_t: &MultimodalLatent,
        tvec: &TimestepVector,
        self_cond: Option<&MultimodalLatent>,
        upstream: &mut dyn FnMut(&MultimodalLatent) -> Result<MultimodalLatent>,
    ) -> Result<(MultimodalLatent, MultimodalLatent)>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict(
        &self,
        z_t: &MultimodalLatent,
        tvec: &TimestepVector,
        self_cond: Option<&MultimodalLatent>,
    ) -> Result<MultimodalLatent> {
        (**self).predict(z_t, tvec, self_cond)
    }

    fn uses_self_conditioning(&self) -> bool {
        (**self).uses_self_conditioning()
    }
}

/// ẑ₀ = (z_t − sqrt(1 − ᾱ) ε̂) / sqrt(ᾱ), each element with its own ᾱ,
/// clamped to ±[`CLEAN_ESTIMATE_CLIP`]. Elements at t = 0 return z_t.
pub fn clean_estimate(
    z_t: &MultimodalLatent,
    eps_hat: &MultimodalLatent,
    tvec: &TimestepVector,
    sched: &NoiseSchedule,
) -> MultimodalLatent {
    let mut out = z_t.clone();
    for m in 0..z_t.modalities() {
        for n in 0..z_t.segments() {
            let t = tvec.get(m, n);
            if t == 0 {
                continue;
            }
            let ab = sched.alpha_bar(t);
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (o, &e) in out.segment_mut(m, n).iter_mut().zip(eps_hat.segment(m, n)) {
                *o = ((*o - sb * e) / sa).clamp(-CLEAN_ESTIMATE_CLIP, CLEAN_ESTIMATE_CLIP);
            }
        }
    }
    out
}
