//! Forward (noising) process under a timestep vector.

use crate::error::{shape_err, Result};
use crate::latent::{MultimodalLatent, NoiseDraw};
use crate::schedule::{NoiseSchedule, TimestepVector};

/// Noises every segment (m, n) to level `tvec[m, n]`:
/// `sqrt(ᾱ) z₀ + sqrt(1 − ᾱ) ε`. Segments at t = 0 are copied unchanged.
pub fn q_sample(
    z0: &MultimodalLatent,
    tvec: &TimestepVector,
    eps: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<MultimodalLatent> {
    z0.ensure_same_shape(eps)?;
    if tvec.modalities() != z0.modalities() || tvec.segments() != z0.segments() {
        return Err(shape_err(
            format!("{}x{} timesteps", z0.modalities(), z0.segments()),
            format!("{}x{}", tvec.modalities(), tvec.segments()),
        ));
    }
    tvec.check_range(sched.steps())?;

    let mut out = z0.clone();
    for m in 0..z0.modalities() {
        for n in 0..z0.segments() {
            let t = tvec.get(m, n);
            if t == 0 {
                continue;
            }
            let ab = sched.alpha_bar(t);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let noise = eps.segment(m, n);
            for (o, &e) in out.segment_mut(m, n).iter_mut().zip(noise) {
                *o = a * *o + b * e;
            }
        }
    }
    Ok(out)
}

/// [`q_sample`] with one timestep for every segment.
pub fn q_sample_scalar(
    z0: &MultimodalLatent,
    t: usize,
    eps: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<MultimodalLatent> {
    sched.check_timestep(t)?;
    let tvec = TimestepVector::filled(t, z0.modalities(), z0.segments());
    q_sample(z0, &tvec, eps, sched)
}
