//! Reverse-process samplers. Every task (joint, cross-modal, continuation,
//! inpainting) runs through the same masked loop: conditioned cells are held
//! clean at timestep 0 and only the remaining cells are updated.

mod baselines;
mod file;

pub use baselines::{
    reconstruction_error, reconstruction_gradient, reconstruction_guided_sample, replacement_sample,
    DIVERGENCE_NORM,
};
pub use file::{SampleFile, SampleHeader, SAMPLE_FILE_VERSION};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{MultimodalLatent, SegmentMask};
use crate::predictor::{clean_estimate, NoisePredictor};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, TimestepVector};

/// Which cells are given and their clean values.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSpec {
    pub mask: SegmentMask,
    pub values: MultimodalLatent,
}

impl ConditionSpec {
    pub fn new(mask: SegmentMask, values: MultimodalLatent) -> Result<Self> {
        mask.matches(values.shape())?;
        for m in 0..mask.modalities() {
            for n in 0..mask.segments() {
                if mask.get(m, n) && values.segment(m, n).iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "conditioning value at (modality {m}, segment {n}) is not finite"
                    )));
                }
            }
        }
        Ok(Self { mask, values })
    }

    /// Nothing conditioned.
    pub fn unconditional(shape: &crate::latent::LatentShape) -> Self {
        Self {
            mask: SegmentMask::all(false, shape.modalities(), shape.segments),
            values: MultimodalLatent::zeros(shape),
        }
    }

    /// Timesteps for the conditional branch: 0 on masked cells, `tau`
    /// elsewhere.
    pub fn timesteps(&self, tau: usize) -> TimestepVector {
        self.timesteps_with(tau, 0)
    }

    fn timesteps_with(&self, tau: usize, masked: usize) -> TimestepVector {
        let (mm, nn) = (self.mask.modalities(), self.mask.segments());
        let mut tv = TimestepVector::filled(tau, mm, nn);
        for m in 0..mm {
            for n in 0..nn {
                if self.mask.get(m, n) {
                    tv.set(m, n, masked);
                }
            }
        }
        tv
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            other => Err(Error::InvalidConfig(format!("unknown sampler '{other}' (expected ddpm or ddim)"))),
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ddpm => "ddpm",
            Self::Ddim => "ddim",
        })
    }
}

/// DDPM noise variance rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceRule {
    /// σ² = β_τ.
    #[default]
    Beta,
    /// σ² = β̃_τ = β_τ (1 − ᾱ_{τ−1}) / (1 − ᾱ_τ).
    Posterior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Number of DDIM steps; DDPM always walks every timestep.
    pub steps: usize,
    #[serde(default)]
    pub guidance_scale: f64,
    #[serde(default)]
    pub variance: VarianceRule,
}

impl SamplerConfig {
    pub fn ddpm(steps: usize) -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            steps,
            guidance_scale: 0.0,
            variance: VarianceRule::Beta,
        }
    }

    pub fn ddim(steps: usize) -> Self {
        Self {
            kind: SamplerKind::Ddim,
            ..Self::ddpm(steps)
        }
    }

    pub fn validate(&self, diffusion_steps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > diffusion_steps {
            return Err(Error::InvalidConfig(format!(
                "sampler steps must lie in [1, {diffusion_steps}], got {}",
                self.steps
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "guidance scale must be finite and >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }

    /// Descending timesteps visited by the sampler.
    pub fn timesteps(&self, diffusion_steps: usize) -> Vec<usize> {
        match self.kind {
            SamplerKind::Ddpm => (1..=diffusion_steps).rev().collect(),
            SamplerKind::Ddim => ddim_timesteps(diffusion_steps, self.steps),
        }
    }
}

/// Evenly spaced `floor(i·T/S)` for i = S..1, so T is included and 0 is not.
pub fn ddim_timesteps(diffusion_steps: usize, steps: usize) -> Vec<usize> {
    (1..=steps).rev().map(|i| i * diffusion_steps / steps).collect()
}

/// One reverse transition τ → τ_prev, written so the DDPM branch matches the
/// textbook expression operation for operation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Transition {
    kind: SamplerKind,
    sqrt_alpha: f64,
    eps_coef: f64,
    sqrt_ab: f64,
    sqrt_1mab: f64,
    sqrt_ab_prev: f64,
    sqrt_1mab_prev: f64,
    pub sigma: f64,
}

impl Transition {
    pub(crate) fn new(cfg: &SamplerConfig, sched: &NoiseSchedule, tau: usize, prev: usize) -> Self {
        let ab = sched.alpha_bar(tau);
        let ab_prev = sched.alpha_bar(prev);
        let sigma = match (cfg.kind, cfg.variance) {
            (SamplerKind::Ddim, _) => 0.0,
            _ if tau == 1 => 0.0,
            (SamplerKind::Ddpm, VarianceRule::Beta) => sched.beta(tau).sqrt(),
            (SamplerKind::Ddpm, VarianceRule::Posterior) => sched.posterior_variance(tau).sqrt(),
        };
        Self {
            kind: cfg.kind,
            sqrt_alpha: sched.alpha(tau).sqrt(),
            eps_coef: sched.beta(tau) / (1.0 - ab).sqrt(),
            sqrt_ab: ab.sqrt(),
            sqrt_1mab: (1.0 - ab).sqrt(),
            sqrt_ab_prev: ab_prev.sqrt(),
            sqrt_1mab_prev: (1.0 - ab_prev).sqrt(),
            sigma,
        }
    }

    /// Deterministic part of the update.
    #[inline]
    pub(crate) fn mean(&self, z: f64, eps: f64) -> f64 {
        match self.kind {
            SamplerKind::Ddpm => (z - self.eps_coef * eps) / self.sqrt_alpha,
            SamplerKind::Ddim => {
                let x0 = (z - self.sqrt_1mab * eps) / self.sqrt_ab;
                self.sqrt_ab_prev * x0 + self.sqrt_1mab_prev * eps
            }
        }
    }

    /// `(∂mean/∂z, ∂mean/∂ε)`.
    pub(crate) fn partials(&self) -> (f64, f64) {
        match self.kind {
            SamplerKind::Ddpm => (1.0 / self.sqrt_alpha, -self.eps_coef / self.sqrt_alpha),
            SamplerKind::Ddim => (
                self.sqrt_ab_prev / self.sqrt_ab,
                self.sqrt_1mab_prev - self.sqrt_ab_prev * self.sqrt_1mab / self.sqrt_ab,
            ),
        }
    }
}

/// Running self-conditioning estimates for the two guidance branches.
#[derive(Default)]
pub(crate) struct SelfCondState {
    pub cond: Option<MultimodalLatent>,
    uncond: Option<MultimodalLatent>,
}

/// Guided noise prediction `(1 + s)·ε̂_cond − s·ε̂_uncond`.
///
/// The conditional branch sees clean values at t = 0 on masked cells; the
/// unconditional branch replaces them by fresh unit noise at t = T. With
/// s = 0 the unconditional branch is skipped and no randomness is consumed.
/// Masked cells of the result hold the conditional prediction.
pub fn cfg_denoise<P: NoisePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    z_t: &MultimodalLatent,
    cond: &ConditionSpec,
    tau: usize,
    s: f64,
    rng: &mut Rng,
) -> Result<MultimodalLatent> {
    guided_eps(model, sched, z_t, cond, tau, s, &mut SelfCondState::default(), false, rng)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn guided_eps<P: NoisePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    z_t: &MultimodalLatent,
    cond: &ConditionSpec,
    tau: usize,
    s: f64,
    sc: &mut SelfCondState,
    track_self_cond: bool,
    rng: &mut Rng,
) -> Result<MultimodalLatent> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::InvalidConfig(format!("guidance scale must be >= 0, got {s}")));
    }
    z_t.ensure_same_shape(&cond.values)?;
    let track = track_self_cond && model.uses_self_conditioning();

    let mut z_c = z_t.clone();
    z_c.copy_masked_from(&cond.values, &cond.mask);
    let t_c = cond.timesteps(tau);
    let eps_c = model.predict(&z_c, &t_c, sc.cond.as_ref())?;
    if track {
        sc.cond = Some(clean_estimate(&z_c, &eps_c, &t_c, sched));
    }
    if s == 0.0 {
        return Ok(eps_c);
    }

    let fresh = MultimodalLatent::standard_normal(z_t.shape(), rng);
    let mut z_u = z_t.clone();
    z_u.copy_masked_from(&fresh, &cond.mask);
    let t_u = cond.timesteps_with(tau, sched.steps());
    let eps_u = model.predict(&z_u, &t_u, sc.uncond.as_ref())?;
    if track {
        sc.uncond = Some(clean_estimate(&z_u, &eps_u, &t_u, sched));
    }
    let mut out = eps_c.zip_map(&eps_u, |c, u| (1.0 + s) * c - s * u)?;
    out.copy_masked_from(&eps_c, &cond.mask);
    Ok(out)
}

/// Masked reverse process. Generated cells start from unit noise (one draw
/// over the whole latent, flat order) and are the only cells updated;
/// masked cells hold `cond.values` throughout and in the result.
///
/// Per step the randomness is consumed as: DDPM noise (τ > 1), then the
/// unconditional-branch noise when guidance is on.
pub fn sample<P: NoisePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    cond: &ConditionSpec,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<MultimodalLatent> {
    cfg.validate(sched.steps())?;
    if cond.mask.all_true() {
        return Ok(cond.values.clone());
    }
    let shape = cond.values.shape().clone();
    let mut z = MultimodalLatent::standard_normal(&shape, rng);
    z.copy_masked_from(&cond.values, &cond.mask);

    let taus = cfg.timesteps(sched.steps());
    let mut sc = SelfCondState::default();
    for (i, &tau) in taus.iter().enumerate() {
        let prev = taus.get(i + 1).copied().unwrap_or(0);
        let step = Transition::new(cfg, sched, tau, prev);
        let noise = (cfg.kind == SamplerKind::Ddpm && tau > 1)
            .then(|| MultimodalLatent::standard_normal(&shape, rng));
        let eps = guided_eps(model, sched, &z, cond, tau, cfg.guidance_scale, &mut sc, true, rng)?;
        for m in 0..shape.modalities() {
            for n in 0..shape.segments {
                if cond.mask.get(m, n) {
                    continue;
                }
                let e = eps.segment(m, n);
                let zs = z.segment_mut(m, n);
                match &noise {
                    Some(w) => {
                        for ((x, &ei), &wi) in zs.iter_mut().zip(e).zip(w.segment(m, n)) {
                            *x = step.mean(*x, ei) + step.sigma * wi;
                        }
                    }
                    None => {
                        for (x, &ei) in zs.iter_mut().zip(e) {
                            *x = step.mean(*x, ei);
                        }
                    }
                }
            }
        }
        if !z.is_finite() {
            return Err(Error::NonFiniteState { step: tau });
        }
    }
    Ok(z)
}

/// Ancestral sampling over all T steps with σ² = β and no guidance.
pub fn ddpm_sample<P: NoisePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    cond: &ConditionSpec,
    rng: &mut Rng,
) -> Result<MultimodalLatent> {
    sample(model, sched, cond, &SamplerConfig::ddpm(sched.steps()), rng)
}

/// Deterministic (η = 0) sampling over `steps` strided timesteps.
pub fn ddim_sample<P: NoisePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    cond: &ConditionSpec,
    steps: usize,
    rng: &mut Rng,
) -> Result<MultimodalLatent> {
    sample(model, sched, cond, &SamplerConfig::ddim(steps), rng)
}

/// Inference tasks expressed as conditioning masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Nothing conditioned.
    Joint,
    /// First modality given, second generated.
    A2v,
    /// Second modality given, first generated.
    V2a,
    /// The first `context` segments of every modality given.
    Continue,
    /// The first segment and the last `tail` segments given.
    Inpaint,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Joint, Task::A2v, Task::V2a, Task::Continue, Task::Inpaint];

    pub fn name(self) -> &'static str {
        match self {
            Task::Joint => "joint",
            Task::A2v => "a2v",
            Task::V2a => "v2a",
            Task::Continue => "continue",
            Task::Inpaint => "inpaint",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown task '{s}' (expected joint, a2v, v2a, continue or inpaint)"
                ))
            })
    }
}

/// Segment counts used by the temporal tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskParams {
    /// Conditioned prefix length for continuation.
    pub context: usize,
    /// Conditioned suffix length for inpainting.
    pub tail: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self { context: 3, tail: 2 }
    }
}

pub fn task_mask(task: Task, modalities: usize, segments: usize, p: TaskParams) -> Result<SegmentMask> {
    let mut mask = SegmentMask::all(false, modalities, segments);
    match task {
        Task::Joint => {}
        Task::A2v | Task::V2a => {
            if modalities < 2 {
                return Err(Error::InvalidConfig(format!("task {task} needs two modalities")));
            }
            let row = if task == Task::A2v { 0 } else { 1 };
            for n in 0..segments {
                mask.set(row, n, true);
            }
        }
        Task::Continue => {
            if p.context == 0 || p.context >= segments {
                return Err(Error::InvalidConfig(format!(
                    "continuation context must lie in [1, {}), got {}",
                    segments, p.context
                )));
            }
            for m in 0..modalities {
                for n in 0..p.context {
                    mask.set(m, n, true);
                }
            }
        }
        Task::Inpaint => {
            if p.tail == 0 || p.tail + 1 >= segments {
                return Err(Error::InvalidConfig(format!(
                    "inpainting tail must lie in [1, {}), got {}",
                    segments.saturating_sub(1),
                    p.tail
                )));
            }
            for m in 0..modalities {
                mask.set(m, 0, true);
                for n in segments - p.tail..segments {
                    mask.set(m, n, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Builds the condition for `task` from a ground-truth example.
pub fn task_condition(task: Task, truth: &MultimodalLatent, p: TaskParams) -> Result<ConditionSpec> {
    let mask = task_mask(task, truth.modalities(), truth.segments(), p)?;
    ConditionSpec::new(mask, truth.clone())
}
