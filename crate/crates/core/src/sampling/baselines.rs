//! Conditioning baselines for models trained with a single scalar timestep:
//! replacement, and reconstruction guidance on top of replacement.

use super::{ConditionSpec, SamplerConfig, SamplerKind, Transition};
use crate::error::{Error, Result};
use crate::forward::q_sample_scalar;
use crate::latent::{MultimodalLatent, SegmentMask};
use crate::predictor::{clean_estimate, DifferentiablePredictor, NoisePredictor};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, TimestepVector};

/// State norm beyond which reconstruction-guided sampling aborts.
pub const DIVERGENCE_NORM: f64 = 1e6;

type Evaluate<'a> = dyn FnMut(
        &MultimodalLatent,
        &TimestepVector,
        Option<&MultimodalLatent>,
        &Transition,
        &MultimodalLatent,
    ) -> Result<(MultimodalLatent, Option<MultimodalLatent>)>
    + 'a;

/// Scalar-timestep reverse process over the whole latent. After every step
/// the masked cells are overwritten with `q_sample(values, τ_prev, ε')`, and
/// once more with the clean values at the end.
///
/// Per step the randomness is consumed as: DDPM noise (τ > 1), then ε'
/// (only when something is masked).
pub fn replacement_sample<P: NoisePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    cond: &ConditionSpec,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<MultimodalLatent> {
    let mut eval = |z: &MultimodalLatent, tv: &TimestepVector, sc: Option<&MultimodalLatent>, _: &Transition, _: &MultimodalLatent| {
        Ok((model.predict(z, tv, sc)?, None))
    };
    baseline_loop(model.uses_self_conditioning(), sched, cond, cfg, 0.0, &mut eval, rng)
}

/// Replacement plus a gradient step on the generated cells that pulls the
/// model's one-step prediction of the conditioned cells towards their
/// re-noised ground truth:
/// `gen ← gen − λ·sqrt(1 − ᾱ_{τ_prev})·∇_gen ‖mask ⊙ (μ(z_τ) − v̂_{τ_prev})‖²`.
pub fn reconstruction_guided_sample<P: DifferentiablePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    cond: &ConditionSpec,
    cfg: &SamplerConfig,
    lambda: f64,
    rng: &mut Rng,
) -> Result<MultimodalLatent> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("guidance weight must be >= 0, got {lambda}")));
    }
    let mask = cond.mask.clone();
    let mut eval = |z: &MultimodalLatent, tv: &TimestepVector, sc: Option<&MultimodalLatent>, step: &Transition, target: &MultimodalLatent| {
        if lambda == 0.0 {
            return Ok((model.predict(z, tv, sc)?, None));
        }
        let (eps, grad) = recon_vjp(model, z, tv, sc, step, &mask, target)?;
        Ok((eps, Some(grad)))
    };
    baseline_loop(model.uses_self_conditioning(), sched, cond, cfg, lambda, &mut eval, rng)
}

fn baseline_loop(
    self_conditioning: bool,
    sched: &NoiseSchedule,
    cond: &ConditionSpec,
    cfg: &SamplerConfig,
    lambda: f64,
    eval: &mut Evaluate<'_>,
    rng: &mut Rng,
) -> Result<MultimodalLatent> {
    cfg.validate(sched.steps())?;
    if cfg.guidance_scale != 0.0 {
        return Err(Error::InvalidConfig(
            "classifier-free guidance is not available for the replacement baselines".into(),
        ));
    }
    if cond.mask.all_true() {
        return Ok(cond.values.clone());
    }
    let shape = cond.values.shape().clone();
    let (mm, nn) = (shape.modalities(), shape.segments);
    let conditioned = cond.mask.any_true();
    let mut z = MultimodalLatent::standard_normal(&shape, rng);
    if conditioned {
        let e = MultimodalLatent::standard_normal(&shape, rng);
        z.copy_masked_from(&q_sample_scalar(&cond.values, sched.steps(), &e, sched)?, &cond.mask);
    }

    let taus = cfg.timesteps(sched.steps());
    let mut sc: Option<MultimodalLatent> = None;
    for (i, &tau) in taus.iter().enumerate() {
        let prev = taus.get(i + 1).copied().unwrap_or(0);
        let step = Transition::new(cfg, sched, tau, prev);
        let noise = (cfg.kind == SamplerKind::Ddpm && tau > 1)
            .then(|| MultimodalLatent::standard_normal(&shape, rng));
        let target = if conditioned {
            let e = MultimodalLatent::standard_normal(&shape, rng);
            q_sample_scalar(&cond.values, prev, &e, sched)?
        } else {
            cond.values.clone()
        };
        let tv = TimestepVector::filled(tau, mm, nn);
        let (eps, grad) = eval(&z, &tv, sc.as_ref(), &step, &target)?;
        if self_conditioning {
            sc = Some(clean_estimate(&z, &eps, &tv, sched));
        }
        let guide = lambda * (1.0 - sched.alpha_bar(prev)).sqrt();
        for m in 0..mm {
            for n in 0..nn {
                let e = eps.segment(m, n);
                let w = noise.as_ref().map(|w| w.segment(m, n));
                let g = grad.as_ref().filter(|_| !cond.mask.get(m, n)).map(|g| g.segment(m, n));
                for (k, x) in z.segment_mut(m, n).iter_mut().enumerate() {
                    let mut v = step.mean(*x, e[k]);
                    if let Some(w) = w {
                        v += step.sigma * w[k];
                    }
                    if let Some(g) = g {
                        v -= guide * g[k];
                    }
                    *x = v;
                }
            }
        }
        z.copy_masked_from(&target, &cond.mask);
        if !z.is_finite() {
            return Err(Error::NonFiniteState { step: tau });
        }
        let norm = z.norm();
        if lambda > 0.0 && norm > DIVERGENCE_NORM {
            return Err(Error::Diverged { step: tau, norm });
        }
    }
    z.copy_masked_from(&cond.values, &cond.mask);
    Ok(z)
}

fn recon_vjp<P: DifferentiablePredictor>(
    model: &P,
    z: &MultimodalLatent,
    tv: &TimestepVector,
    sc: Option<&MultimodalLatent>,
    step: &Transition,
    mask: &SegmentMask,
    target: &MultimodalLatent,
) -> Result<(MultimodalLatent, MultimodalLatent)> {
    let (dz_direct, de) = step.partials();
    let mut residual = MultimodalLatent::zeros(z.shape());
    let mut upstream = |eps: &MultimodalLatent| {
        let mut g = MultimodalLatent::zeros(z.shape());
        for m in 0..z.modalities() {
            for n in 0..z.segments() {
                if !mask.get(m, n) {
                    continue;
                }
                let (zs, es, ts) = (z.segment(m, n), eps.segment(m, n), target.segment(m, n));
                let r = residual.segment_mut(m, n);
                for (k, gk) in g.segment_mut(m, n).iter_mut().enumerate() {
                    r[k] = step.mean(zs[k], es[k]) - ts[k];
                    *gk = 2.0 * de * r[k];
                }
            }
        }
        Ok(g)
    };
    let (eps, mut grad) = model.predict_vjp(z, tv, sc, &mut upstream)?;
    for m in 0..z.modalities() {
        for n in 0..z.segments() {
            if mask.get(m, n) {
                for (g, &r) in grad.segment_mut(m, n).iter_mut().zip(residual.segment(m, n)) {
                    *g += 2.0 * dz_direct * r;
                }
            }
        }
    }
    Ok((eps, grad))
}

/// `‖mask ⊙ (μ(z) − target)‖²` for the scalar-timestep transition
/// `tau → prev`, where μ is the deterministic part of the reverse update.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_error<P: NoisePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    z: &MultimodalLatent,
    tau: usize,
    prev: usize,
    self_cond: Option<&MultimodalLatent>,
    mask: &SegmentMask,
    target: &MultimodalLatent,
) -> Result<f64> {
    let step = Transition::new(cfg, sched, tau, prev);
    let tv = TimestepVector::filled(tau, z.modalities(), z.segments());
    let eps = model.predict(z, &tv, self_cond)?;
    let mut total = 0.0;
    for m in 0..z.modalities() {
        for n in 0..z.segments() {
            if mask.get(m, n) {
                for ((&x, &e), &t) in z.segment(m, n).iter().zip(eps.segment(m, n)).zip(target.segment(m, n)) {
                    let r = step.mean(x, e) - t;
                    total += r * r;
                }
            }
        }
    }
    Ok(total)
}

/// Gradient of [`reconstruction_error`] with respect to every entry of `z`.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_gradient<P: DifferentiablePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    z: &MultimodalLatent,
    tau: usize,
    prev: usize,
    self_cond: Option<&MultimodalLatent>,
    mask: &SegmentMask,
    target: &MultimodalLatent,
) -> Result<MultimodalLatent> {
    let step = Transition::new(cfg, sched, tau, prev);
    let tv = TimestepVector::filled(tau, z.modalities(), z.segments());
    Ok(recon_vjp(model, z, &tv, self_cond, &step, mask, target)?.1)
}
