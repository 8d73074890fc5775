//! Task-agnostic training: every example gets its own timestep vector drawn
//! from the configured strategy, and a single noise-prediction loss covers
//! all cells regardless of their noise level.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Checkpoint, DenoiserParams, WeightSet};
use crate::error::{shape_err, Error, Result};
use crate::forward::q_sample;
use crate::latent::MultimodalLatent;
use crate::predictor::{clean_estimate, NoisePredictor};
use crate::rng::Rng;
use crate::schedule::{sample_timestep_vector_with_kind, NoiseSchedule, StrategyKind};

/// Optimisation and schedule settings.
///
/// Desk defaults: lr 1e-3, 100 warmup steps, EMA 0.999, batch 32. The
/// reference large-scale run used lr 5e-4, 5K warmup steps and batch 256.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: StrategyKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub ema_decay: f64,
    /// Ramp the EMA decay as min(ema_decay, (1 + n)/(10 + n)) after n
    /// steps so early averages are not dominated by the initialisation.
    #[serde(default = "defaults::ema_warmup")]
    pub ema_warmup: bool,
    /// Probability of feeding a self-conditioning estimate (0.9 in the
    /// reference setup).
    pub self_cond_rate: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::beta1")]
    pub adam_beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub adam_beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    /// Optional global-norm gradient cap.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

mod defaults {
    pub fn weight_decay() -> f64 {
        0.01
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn ema_warmup() -> bool {
        true
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::MoNL,
            batch_size: 32,
            learning_rate: 3e-3,
            warmup_steps: 100,
            total_steps: 3000,
            ema_decay: 0.999,
            ema_warmup: true,
            self_cond_rate: 0.9,
            weight_decay: defaults::weight_decay(),
            adam_beta1: defaults::beta1(),
            adam_beta2: defaults::beta2(),
            adam_eps: defaults::adam_eps(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.self_cond_rate) {
            return bad(format!("self_cond_rate must lie in [0, 1], got {}", self.self_cond_rate));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return bad("grad_clip must be positive".into());
            }
        }
        Ok(())
    }
}

/// Mean squared error over every element of every modality.
pub fn mse_loss(eps_hat: &MultimodalLatent, eps: &MultimodalLatent) -> Result<f64> {
    eps_hat.ensure_same_shape(eps)?;
    let sum: f64 = eps_hat
        .values()
        .zip(eps.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / eps.numel() as f64)
}

/// Linear warmup to the peak rate, then cosine decay to zero at
/// `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let peak = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return if cfg.total_steps == cfg.warmup_steps { peak } else { 0.0 };
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decay used by the EMA update that completes step `step` (1-based).
pub fn ema_decay_at(step: u64, config: &TrainConfig) -> f64 {
    if config.ema_warmup {
        config.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64))
    } else {
        config.ema_decay
    }
}

/// `ema ← decay·ema + (1 − decay)·params`, elementwise.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    debug_assert_eq!(ema.len(), params.len());
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    decay_mask: Vec<f64>,
}

impl AdamW {
    pub fn new(params: &DenoiserParams) -> Self {
        let n = params.num_params();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            decay_mask: params.layout().decay_mask(),
        }
    }

    pub fn step(&mut self, weights: &mut [f64], grads: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..weights.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            weights[i] -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * self.decay_mask[i] * weights[i]);
        }
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub optimizer: AdamW,
    /// Completed optimisation steps.
    pub step: u64,
    pub rng: Rng,
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub lr: f64,
    /// Resolved base strategy of each batch example.
    pub strategies: Vec<StrategyKind>,
}

impl TrainState {
    pub fn new(params: DenoiserParams, rng: Rng) -> Self {
        let optimizer = AdamW::new(&params);
        Self {
            params,
            optimizer,
            step: 0,
            rng,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.sections.push(("adam_m".into(), self.optimizer.m.clone()));
        ck.sections.push(("adam_v".into(), self.optimizer.v.clone()));
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        ck.extra = serde_json::json!({
            "train_state": {
                "step": self.step,
                "adam_t": self.optimizer.t,
                "rng_seed": seed,
                "rng_stream": self.rng.get_stream(),
                "rng_word_pos": self.rng.get_word_pos().to_string(),
            }
        });
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let ts = &ck.extra["train_state"];
        let missing = |what: &str| Error::Format(format!("checkpoint lacks train_state.{what}"));
        let step = ts["step"].as_u64().ok_or_else(|| missing("step"))?;
        let adam_t = ts["adam_t"].as_u64().ok_or_else(|| missing("adam_t"))?;
        let seed_hex = ts["rng_seed"].as_str().ok_or_else(|| missing("rng_seed"))?;
        let stream = ts["rng_stream"].as_u64().ok_or_else(|| missing("rng_stream"))?;
        let word_pos: u128 = ts["rng_word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| missing("rng_word_pos"))?;
        if seed_hex.len() != 64 {
            return Err(missing("rng_seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| missing("rng_seed"))?;
        }
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let mut optimizer = AdamW::new(&ck.params);
        optimizer.m = ck.section("adam_m").ok_or_else(|| missing("adam_m"))?.to_vec();
        optimizer.v = ck.section("adam_v").ok_or_else(|| missing("adam_v"))?.to_vec();
        optimizer.t = adam_t;
        Ok(Self {
            params: ck.params,
            optimizer,
            step,
            rng,
        })
    }
}

/// Mean training loss over `batch` and its gradient with respect to the raw
/// weights, before any optimiser transform.
///
/// Per example, randomness is consumed in this order: timestep vector
/// (mixture choice, then the reference matrix), the noise draw in flat
/// latent order, then the self-conditioning coin (self-conditioning models
/// only). `step` is only used in error reports.
pub fn loss_and_grad(
    params: &DenoiserParams,
    batch: &[MultimodalLatent],
    config: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    step: u64,
) -> Result<(f64, Vec<f64>, Vec<StrategyKind>)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let model_cfg = params.config();
    let shape = model_cfg.latent_shape();
    if sched.steps() != model_cfg.steps {
        return Err(shape_err(
            format!("{} diffusion steps", model_cfg.steps),
            format!("schedule with {}", sched.steps()),
        ));
    }
    let (mm, nn) = (model_cfg.modalities(), model_cfg.segments);
    let view = params.view(WeightSet::Raw);
    let mut grads = vec![0.0; params.num_params()];
    let mut loss_sum = 0.0;
    let mut strategies = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len() as f64;

    for z0 in batch {
        if *z0.shape() != shape {
            return Err(shape_err(&shape, z0.shape()));
        }
        let (tvec, kind) = sample_timestep_vector_with_kind(config.strategy, mm, nn, sched.steps(), rng);
        let eps = MultimodalLatent::standard_normal(&shape, rng);
        let z_t = q_sample(z0, &tvec, &eps, sched)?;
        let self_cond = if model_cfg.self_conditioning {
            let coin: f64 = rng.random();
            if coin < config.self_cond_rate {
                let first = view.predict(&z_t, &tvec, None)?;
                Some(clean_estimate(&z_t, &first, &tvec, sched))
            } else {
                None
            }
        } else {
            None
        };
        let (eps_hat, cache) = view.forward(&z_t, &tvec, self_cond.as_ref())?;
        let mse = mse_loss(&eps_hat, &eps)?;
        if !mse.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                strategy: kind,
                loss: mse,
            });
        }
        loss_sum += mse;
        let g = 2.0 * scale / eps.numel() as f64;
        let d_out = eps_hat.zip_map(&eps, |a, b| g * (a - b))?;
        view.backward(&cache, &d_out, &mut grads)?;
        strategies.push(kind);
    }
    Ok((loss_sum * scale, grads, strategies))
}

/// One optimisation step on `batch`, drawing randomness from the state's
/// stream as described for [`loss_and_grad`].
pub fn train_step(
    state: &mut TrainState,
    batch: &[MultimodalLatent],
    config: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<StepOutcome> {
    let (loss, mut grads, strategies) =
        loss_and_grad(&state.params, batch, config, sched, &mut state.rng, state.step)?;

    if let Some(cap) = config.grad_clip {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cap {
            let k = cap / norm;
            grads.iter_mut().for_each(|g| *g *= k);
        }
    }
    let lr = lr_at(state.step + 1, config);
    state.optimizer.step(state.params.weights_mut(), &grads, lr, config);
    let (w, ema) = state.params.weights_and_ema_mut();
    ema_update(ema, w, ema_decay_at(state.step + 1, config));
    state.step += 1;
    Ok(StepOutcome { loss, lr, strategies })
}

/// Draws `size` example indices uniformly with replacement.
pub fn sample_batch<'a>(
    examples: &'a [MultimodalLatent],
    size: usize,
    rng: &mut Rng,
) -> Vec<&'a MultimodalLatent> {
    (0..size).map(|_| &examples[rng.random_range(0..examples.len())]).collect()
}

/// One JSON-lines metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub strategy_counts: BTreeMap<String, u64>,
}

/// Runs steps until `state.step == until`, invoking `on_step` after each.
pub fn train_loop(
    state: &mut TrainState,
    examples: &[MultimodalLatent],
    config: &TrainConfig,
    sched: &NoiseSchedule,
    until: u64,
    mut on_step: impl FnMut(&TrainState, &StepOutcome) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidConfig("no training examples".into()));
    }
    while state.step < until {
        let batch: Vec<MultimodalLatent> = sample_batch(examples, config.batch_size, &mut state.rng)
            .into_iter()
            .cloned()
            .collect();
        let outcome = train_step(state, &batch, config, sched)?;
        on_step(state, &outcome)?;
    }
    Ok(())
}
