//! Noise schedules and diffusion timestep vectors.
//!
//! A [`TimestepVector`] assigns one diffusion timestep to every
//! (modality, time-segment) cell of a multimodal latent. The training
//! strategies differ only in how a reference matrix of uniform draws is
//! broadcast over that grid.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Parameters of a linear beta schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// β, α and ᾱ tables. Index 0 is the clean-data level: ᾱ₀ = 1 and β₀ is
/// unused.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let mut betas = Vec::with_capacity(steps + 1);
    betas.push(0.0);
    for t in 1..=steps {
        let beta = if steps == 1 {
            beta_start
        } else {
            beta_start + (t - 1) as f64 / (steps - 1) as f64 * (beta_end - beta_start)
        };
        betas.push(beta);
    }
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// `betas[0]` is ignored; `betas[1..=T]` must lie in (0, 1).
    fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if let Some(b) = betas[1..].iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = std::iter::once(1.0)
            .chain(betas[1..].iter().map(|b| 1.0 - b))
            .collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        alpha_bars.push(1.0);
        for t in 1..alphas.len() {
            alpha_bars.push(alpha_bars[t - 1] * alphas[t]);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        self.alphas[t]
    }

    /// ᾱ_t for t in 0..=T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Posterior variance β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }
}

/// Timestep assignment strategy used during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    /// One timestep for the whole latent.
    Vanilla,
    /// One timestep per modality.
    Pm,
    /// One timestep per time-segment, shared across modalities.
    Pt,
    /// Independent timestep for every cell.
    Ptm,
    /// Uniform mixture of Vanilla, Pt, Pm and Ptm.
    MoNL,
    /// Uniform mixture of Pt, Pm and Ptm (no Vanilla component).
    PtPmPtm,
}

impl StrategyKind {
    /// The four strategies that a sample can actually resolve to.
    pub const BASE: [StrategyKind; 4] = [
        StrategyKind::Vanilla,
        StrategyKind::Pm,
        StrategyKind::Pt,
        StrategyKind::Ptm,
    ];

    pub fn is_mixture(self) -> bool {
        matches!(self, StrategyKind::MoNL | StrategyKind::PtPmPtm)
    }

    /// Draws a base strategy for mixtures; base kinds return themselves
    /// without consuming randomness.
    pub fn resolve(self, rng: &mut Rng) -> StrategyKind {
        match self {
            StrategyKind::MoNL => {
                const CHOICES: [StrategyKind; 4] = [
                    StrategyKind::Vanilla,
                    StrategyKind::Pt,
                    StrategyKind::Pm,
                    StrategyKind::Ptm,
                ];
                CHOICES[rng.random_range(0..CHOICES.len())]
            }
            StrategyKind::PtPmPtm => {
                const CHOICES: [StrategyKind; 3] =
                    [StrategyKind::Pt, StrategyKind::Pm, StrategyKind::Ptm];
                CHOICES[rng.random_range(0..CHOICES.len())]
            }
            base => base,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Vanilla => "vanilla",
            StrategyKind::Pm => "pm",
            StrategyKind::Pt => "pt",
            StrategyKind::Ptm => "ptm",
            StrategyKind::MoNL => "monl",
            StrategyKind::PtPmPtm => "pt/pm/ptm",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(StrategyKind::Vanilla),
            "pm" => Ok(StrategyKind::Pm),
            "pt" => Ok(StrategyKind::Pt),
            "ptm" => Ok(StrategyKind::Ptm),
            "monl" => Ok(StrategyKind::MoNL),
            "pt/pm/ptm" | "ptpmptm" => Ok(StrategyKind::PtPmPtm),
            other => Err(Error::InvalidConfig(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Integer matrix of shape M × N with entries in [0, T], row-major by
/// modality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepVector {
    modalities: usize,
    segments: usize,
    entries: Vec<usize>,
}

impl TimestepVector {
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let modalities = rows.len();
        let segments = rows.first().map_or(0, Vec::len);
        if modalities == 0 || segments == 0 || rows.iter().any(|r| r.len() != segments) {
            return Err(Error::InvalidConfig("timestep rows must be non-empty and rectangular".into()));
        }
        Ok(Self {
            modalities,
            segments,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    pub fn filled(tau: usize, modalities: usize, segments: usize) -> Self {
        Self {
            modalities,
            segments,
            entries: vec![tau; modalities * segments],
        }
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> usize {
        self.entries[m * self.segments + n]
    }

    #[inline]
    pub fn set(&mut self, m: usize, n: usize, t: usize) {
        self.entries[m * self.segments + n] = t;
    }

    /// Entries in token order (modality-major).
    pub fn entries(&self) -> &[usize] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.entries.chunks(self.segments).map(<[usize]>::to_vec).collect()
    }

    pub fn max(&self) -> usize {
        self.entries.iter().copied().max().unwrap_or(0)
    }

    pub fn check_range(&self, steps: usize) -> Result<()> {
        match self.entries.iter().find(|&&t| t > steps) {
            Some(&t) => Err(Error::TimestepOutOfRange { t, max: steps }),
            None => Ok(()),
        }
    }
}

/// Every entry equal to `tau`. `tau = 0` marks clean data, `tau = T` pure
/// noise.
pub fn constant_timestep_vector(
    tau: usize,
    modalities: usize,
    segments: usize,
    steps: usize,
) -> Result<TimestepVector> {
    if tau > steps {
        return Err(Error::TimestepOutOfRange { t: tau, max: steps });
    }
    Ok(TimestepVector::filled(tau, modalities, segments))
}

/// Broadcasts a full reference matrix according to a base strategy.
pub fn broadcast(kind: StrategyKind, t_ref: &TimestepVector) -> TimestepVector {
    assert!(!kind.is_mixture(), "broadcast needs a resolved strategy");
    let (mm, nn) = (t_ref.modalities, t_ref.segments);
    let mut out = TimestepVector::filled(0, mm, nn);
    for m in 0..mm {
        for n in 0..nn {
            let t = match kind {
                StrategyKind::Vanilla => t_ref.get(0, 0),
                StrategyKind::Pm => t_ref.get(m, 0),
                StrategyKind::Pt => t_ref.get(0, n),
                _ => t_ref.get(m, n),
            };
            out.set(m, n, t);
        }
    }
    out
}

/// Draws a timestep vector and reports which base strategy produced it.
///
/// Randomness is consumed in a fixed order: the mixture choice (mixtures
/// only), then the full M × N reference matrix in row-major order, each entry
/// uniform on {1..T}.
pub fn sample_timestep_vector_with_kind(
    kind: StrategyKind,
    modalities: usize,
    segments: usize,
    steps: usize,
    rng: &mut Rng,
) -> (TimestepVector, StrategyKind) {
    assert!(modalities >= 1 && segments >= 1 && steps >= 1);
    let resolved = kind.resolve(rng);
    let entries = (0..modalities * segments)
        .map(|_| rng.random_range(1..=steps))
        .collect();
    let t_ref = TimestepVector {
        modalities,
        segments,
        entries,
    };
    (broadcast(resolved, &t_ref), resolved)
}

pub fn sample_timestep_vector(
    kind: StrategyKind,
    modalities: usize,
    segments: usize,
    steps: usize,
    rng: &mut Rng,
) -> TimestepVector {
    sample_timestep_vector_with_kind(kind, modalities, segments, steps, rng).0
}
