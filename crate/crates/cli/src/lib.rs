//! Command implementations behind the `monl` binary.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use monl::data::{gen_coupled, load_dataset, Dataset};
use monl::denoiser::{init_denoiser, Checkpoint, WeightSet};
use monl::eval::{generate_task_samples, score_task, validate_report, BatteryConfig, Method, MetricsReport, TaskMetrics};
use monl::rng::stream;
use monl::sampling::{task_mask, SampleFile, SamplerConfig, SamplerKind, Task};
use monl::schedule::{NoiseSchedule, StrategyKind};
use monl::training::{train_loop, MetricsRecord, TrainState};

pub use config::RunConfig;
use config::seeds;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<monl::Error> for CliError {
    fn from(e: monl::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(what: &str, path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{what} {}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err("cannot create", dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err("cannot write", path, e))
}

/// Writes the resolved configuration as `<output>.config.json`.
fn write_resolved(cfg: &RunConfig, output: &Path) -> Result<()> {
    let mut name = output.as_os_str().to_owned();
    name.push(".config.json");
    write_file(Path::new(&name), cfg.to_json().as_bytes())
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    Ok(cfg.schedule.build()?)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = load_dataset(&cfg.paths.dataset).map_err(|e| io_err("cannot load dataset", &cfg.paths.dataset, e))?;
    if ds.config != cfg.data.coupled {
        return Err(CliError::Runtime(format!(
            "dataset {} was generated with a different data configuration",
            cfg.paths.dataset.display()
        )));
    }
    Ok(ds)
}

/// Generates the train and eval splits into one dataset file.
pub fn cmd_gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.dataset.clone());
    let total = cfg.data.n_train + cfg.data.n_eval;
    let ds = gen_coupled(&cfg.data.coupled, total, cfg.sub_seed(seeds::DATA))?.with_split(cfg.data.n_train)?;
    write_file(&path, &ds.to_bytes()?)?;
    write_resolved(cfg, &path)?;
    let stats = serde_json::json!({
        "dataset": path,
        "examples": total,
        "train": cfg.data.n_train,
        "eval": cfg.data.n_eval,
        "mean": ds.stats.mean,
        "var": ds.stats.var,
    });
    println!("{stats}");
    Ok(path)
}

#[derive(Default)]
struct Interval {
    loss: f64,
    steps: u64,
    counts: BTreeMap<String, u64>,
}

/// Trains to `train.total_steps`, writing checkpoints and `metrics.jsonl`
/// under the run directory.
pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>, resume: Option<&Path>) -> Result<PathBuf> {
    let run_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.run_dir.clone());
    fs::create_dir_all(&run_dir).map_err(|e| io_err("cannot create", &run_dir, e))?;
    let ds = load_data(cfg)?;
    let sched = schedule(cfg)?;
    let tc = &cfg.train.optim;
    let metrics_path = run_dir.join("metrics.jsonl");

    let mut state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(|e| io_err("cannot load checkpoint", p, e))?;
            if ck.params.config() != &cfg.model {
                return Err(CliError::Runtime(format!(
                    "checkpoint {} was trained with a different model configuration",
                    p.display()
                )));
            }
            let st = TrainState::from_checkpoint(ck)?;
            truncate_metrics(&metrics_path, st.step)?;
            st
        }
        None => {
            let params = init_denoiser(&cfg.model, &mut stream(cfg.sub_seed(seeds::INIT), &[]))?;
            write_file(&metrics_path, b"")?;
            TrainState::new(params, stream(cfg.sub_seed(seeds::TRAIN), &[]))
        }
    };
    write_resolved(cfg, &run_dir.join("train"))?;

    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| io_err("cannot open", &metrics_path, e))?;
    let mut acc = Interval::default();
    let total = tc.total_steps;
    train_loop(&mut state, ds.train(), tc, &sched, total, |st, o| {
        acc.loss += o.loss;
        acc.steps += 1;
        for k in &o.strategies {
            *acc.counts.entry(k.name().to_string()).or_default() += 1;
        }
        if st.step % cfg.train.log_every == 0 || st.step == total {
            let rec = MetricsRecord {
                step: st.step,
                loss: acc.loss / acc.steps as f64,
                lr: o.lr,
                strategy_counts: std::mem::take(&mut acc.counts),
            };
            acc = Interval::default();
            let line = serde_json::to_string(&rec)? + "\n";
            log.write_all(line.as_bytes())?;
        }
        if cfg.train.checkpoint_every > 0 && st.step % cfg.train.checkpoint_every == 0 && st.step != total {
            st.to_checkpoint().save(run_dir.join(format!("step_{:06}.ckpt", st.step)))?;
        }
        Ok(())
    })?;
    let final_path = run_dir.join("final.ckpt");
    state.to_checkpoint().save(&final_path)?;
    println!(
        "{}",
        serde_json::json!({"checkpoint": final_path, "step": state.step, "strategy": tc.strategy.name()})
    );
    Ok(final_path)
}

fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let kept: Vec<String> = match fs::File::open(path) {
        Ok(f) => BufReader::new(f)
            .lines()
            .map_while(|l| l.ok())
            .filter(|l| {
                serde_json::from_str::<MetricsRecord>(l)
                    .map(|r| r.step <= step)
                    .unwrap_or(false)
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    let body: String = kept.into_iter().map(|l| l + "\n").collect();
    write_file(path, body.as_bytes())
}

/// Sampling options that may override the configuration.
#[derive(Clone, Debug, Default)]
pub struct SampleOptions {
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub sampler: Option<SamplerKind>,
    pub steps: Option<usize>,
    pub guidance: Option<f64>,
    pub baseline: Option<Baseline>,
    pub lambda: Option<f64>,
    pub raw_weights: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    Replacement,
    ReconGuided,
}

/// Samples one output per held-out example for `task`.
pub fn cmd_sample(cfg: &RunConfig, task: Task, opts: &SampleOptions) -> Result<PathBuf> {
    let ck_path = opts.checkpoint.clone().unwrap_or_else(|| cfg.paths.run_dir.join("final.ckpt"));
    let ck = Checkpoint::load(&ck_path).map_err(|e| io_err("cannot load checkpoint", &ck_path, e))?;
    let ds = load_data(cfg)?;
    let shape = cfg.data.coupled.shape();
    if ck.params.config().latent_shape() != shape || ck.params.config().steps != cfg.schedule.steps {
        return Err(CliError::Runtime(format!(
            "shape mismatch: checkpoint expects {} with T={}, configuration has {} with T={}",
            ck.params.config().latent_shape(),
            ck.params.config().steps,
            shape,
            cfg.schedule.steps
        )));
    }
    let sched = schedule(cfg)?;
    let mut sampler: SamplerConfig = cfg.sampler.clone();
    if let Some(k) = opts.sampler {
        sampler.kind = k;
    }
    if let Some(s) = opts.steps {
        sampler.steps = s;
    }
    if let Some(g) = opts.guidance {
        sampler.guidance_scale = g;
    }
    sampler.validate(sched.steps())?;
    let method = match opts.baseline {
        None => Method::Masked,
        Some(Baseline::Replacement) => Method::Replacement,
        Some(Baseline::ReconGuided) => Method::ReconGuided {
            lambda: opts.lambda.unwrap_or(cfg.eval.recon_lambda),
        },
    };
    let which = if opts.raw_weights { WeightSet::Raw } else { WeightSet::Ema };
    let model = ck.params.view(which);
    let seed = cfg.sub_seed(seeds::SAMPLE);
    let bc = BatteryConfig {
        sampler: sampler.clone(),
        method,
        seed,
        task_params: cfg.tasks,
        max_examples: None,
    };
    let truths = &ds.eval()[..cfg.eval.examples.min(ds.eval().len())];
    let samples = generate_task_samples(&model, &sched, truths, task, &bc)?;
    let mask = task_mask(task, shape.modalities(), shape.segments, cfg.tasks)?;
    let provenance = serde_json::json!({
        "checkpoint": ck_path,
        "weights": if opts.raw_weights { "raw" } else { "ema" },
        "dataset": cfg.paths.dataset,
        "split": "eval",
        "examples": [0, truths.len()],
        "master_seed": cfg.seed,
        "method": method,
        "task_params": cfg.tasks,
    });
    let baseline = opts.baseline.map(|b| match b {
        Baseline::Replacement => "replacement".to_string(),
        Baseline::ReconGuided => "recon-guided".to_string(),
    });
    let file = SampleFile::new(&mask, Some(task), seed, sampler, baseline, provenance, samples)?;
    let out = opts
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.samples_dir.join(format!("{task}.smpl")));
    write_file(&out, &file.to_bytes()?)?;
    write_resolved(cfg, &out)?;
    println!("{}", serde_json::json!({"samples": out, "task": task.name(), "count": file.header.count}));
    Ok(out)
}

/// Scores every `*.smpl` file in the samples directory against the
/// held-out examples.
pub fn cmd_eval(cfg: &RunConfig, samples_dir: Option<&Path>, out: Option<&Path>) -> Result<MetricsReport> {
    let dir = samples_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.samples_dir.clone());
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| io_err("cannot read samples directory", &dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "smpl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Runtime(format!("no sample files in {}", dir.display())));
    }
    let ds = load_data(cfg)?;
    let shape = cfg.data.coupled.shape();
    let mut report = MetricsReport::new();
    for path in &files {
        let f = SampleFile::load(path).map_err(|e| io_err("invalid sample file", path, e))?;
        let schema = |m: String| CliError::Runtime(format!("{}: {m}", path.display()));
        let task = f.header.task.ok_or_else(|| schema("sample header has no task".into()))?;
        if f.header.shape != shape {
            return Err(schema(format!("samples have shape {}, dataset has {}", f.header.shape, shape)));
        }
        if f.mask()? != task_mask(task, shape.modalities(), shape.segments, cfg.tasks)? {
            return Err(schema(format!("mask does not match task {task}")));
        }
        if f.header.count > ds.eval().len() {
            return Err(schema(format!("{} samples but only {} held-out examples", f.header.count, ds.eval().len())));
        }
        let truths = &ds.eval()[..f.header.count];
        let (fr, mse) = score_task(task, &f.samples, truths, cfg.tasks)?;
        let key = task.name().to_string();
        if report.tasks.contains_key(&key) {
            return Err(schema(format!("a second sample file for task {task}")));
        }
        let s = &f.header.sampler;
        report.tasks.insert(
            key,
            TaskMetrics {
                frechet: Some(fr),
                mse,
                n: f.header.count,
                seed: f.header.seed,
                sampler: format!(
                    "{}({} steps, s={}) {}",
                    s.kind,
                    s.steps,
                    s.guidance_scale,
                    f.header.baseline.as_deref().unwrap_or("masked")
                ),
                error: None,
            },
        );
    }
    let doc = serde_json::to_value(&report).map_err(monl::Error::from)?;
    validate_report(&doc)?;
    let text = serde_json::to_string_pretty(&doc).map_err(monl::Error::from)? + "\n";
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.report.clone());
    write_file(&out, text.as_bytes())?;
    write_resolved(cfg, &out)?;
    print!("{text}");
    Ok(report)
}

/// β and ᾱ every `every` steps, plus the endpoints.
pub fn cmd_inspect_schedule(cfg: &RunConfig, every: usize) -> Result<String> {
    let sched = schedule(cfg)?;
    let every = every.max(1);
    let mut out = String::from("t\tbeta\talpha_bar\n");
    let t_max = sched.steps();
    for t in 1..=t_max {
        if t == 1 || t % every == 0 || t == t_max {
            out += &format!("{t}\t{:.6e}\t{:.6e}\n", sched.beta(t), sched.alpha_bar(t));
        }
    }
    Ok(out)
}

/// Applies a `--strategy` override.
pub fn parse_strategy(s: &str) -> Result<StrategyKind> {
    s.parse::<StrategyKind>().map_err(|e| CliError::Usage(e.to_string()))
}

pub fn parse_task(s: &str) -> Result<Task> {
    s.parse::<Task>().map_err(|e| CliError::Usage(e.to_string()))
}
