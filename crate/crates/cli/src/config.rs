//! The versioned run configuration.

use std::path::{Path, PathBuf};

use monl::data::CoupledConfig;
use monl::denoiser::DenoiserConfig;
use monl::rng::derive_seed;
use monl::sampling::{SamplerConfig, TaskParams};
use monl::schedule::ScheduleConfig;
use monl::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub train: TrainOptions,
    pub sampler: SamplerConfig,
    pub data: DataOptions,
    pub tasks: TaskParams,
    pub eval: EvalOptions,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    #[serde(flatten)]
    pub optim: TrainConfig,
    /// Write an intermediate checkpoint every this many steps (0: final only).
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Steps aggregated into one metrics record.
    #[serde(default = "one")]
    pub log_every: u64,
}

fn one() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataOptions {
    pub coupled: CoupledConfig,
    pub n_train: usize,
    pub n_eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Number of held-out examples to condition on and score against.
    pub examples: usize,
    /// Guidance weight for the reconstruction-guided baseline.
    #[serde(default = "default_lambda")]
    pub recon_lambda: f64,
}

fn default_lambda() -> f64 {
    0.02
}

/// Relative paths resolve against the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub run_dir: PathBuf,
    pub samples_dir: PathBuf,
    pub report: PathBuf,
}

/// Sub-seed labels for the master seed.
pub mod seeds {
    pub const DATA: u64 = 101;
    pub const INIT: u64 = 102;
    pub const TRAIN: u64 = 103;
    pub const SAMPLE: u64 = 104;
}

impl RunConfig {
    /// The desk-scale defaults with paths under `root`.
    pub fn desk(root: &Path) -> Self {
        let coupled = CoupledConfig::default();
        let mut model = DenoiserConfig::desk(vec![coupled.d1, coupled.d2], coupled.segments);
        model.steps = ScheduleConfig::default().steps;
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            schedule: ScheduleConfig::default(),
            model,
            train: TrainOptions {
                optim: TrainConfig::default(),
                checkpoint_every: 1000,
                log_every: 10,
            },
            sampler: SamplerConfig::ddim(100),
            data: DataOptions {
                coupled,
                n_train: 4096,
                n_eval: 512,
            },
            tasks: TaskParams::default(),
            eval: EvalOptions {
                examples: 128,
                recon_lambda: default_lambda(),
            },
            paths: Paths {
                dataset: root.join("data.monl"),
                run_dir: root.join("run"),
                samples_dir: root.join("samples"),
                report: root.join("report.json"),
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.dataset,
            &mut cfg.paths.run_dir,
            &mut cfg.paths.samples_dir,
            &mut cfg.paths.report,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Runtime(format!("invalid config: {m}")));
        if self.version != CONFIG_VERSION {
            return bad(format!("version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        self.schedule.build()?;
        self.model.validate()?;
        self.train.optim.validate()?;
        self.sampler.validate(self.schedule.steps)?;
        self.data.coupled.validate()?;
        let c = &self.data.coupled;
        if self.model.widths != [c.d1, c.d2] || self.model.segments != c.segments {
            return bad(format!(
                "model expects widths {:?} over {} segments but data produces [{}, {}] over {}",
                self.model.widths, self.model.segments, c.d1, c.d2, c.segments
            ));
        }
        if self.model.steps != self.schedule.steps {
            return bad(format!(
                "model.steps {} differs from schedule.steps {}",
                self.model.steps, self.schedule.steps
            ));
        }
        if self.data.n_train == 0 || self.data.n_eval == 0 {
            return bad("data.n_train and data.n_eval must be >= 1".into());
        }
        if self.eval.examples == 0 || self.eval.examples > self.data.n_eval {
            return bad(format!(
                "eval.examples must lie in [1, {}], got {}",
                self.data.n_eval, self.eval.examples
            ));
        }
        if self.train.log_every == 0 {
            return bad("train.log_every must be >= 1".into());
        }
        monl::sampling::task_mask(monl::sampling::Task::Continue, 2, c.segments, self.tasks)?;
        monl::sampling::task_mask(monl::sampling::Task::Inpaint, 2, c.segments, self.tasks)?;
        Ok(())
    }

    pub fn sub_seed(&self, label: u64) -> u64 {
        derive_seed(self.seed, &[label])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }
}
