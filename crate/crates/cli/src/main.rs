use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use monl::sampling::{SamplerKind, Task};
use monl::schedule::StrategyKind;
use monl_cli::{
    cmd_eval, cmd_gen_data, cmd_inspect_schedule, cmd_sample, cmd_train, parse_strategy, parse_task, Baseline,
    CliError, RunConfig, SampleOptions,
};

/// Mixture-of-noise-levels multimodal diffusion on synthetic latents.
#[derive(Parser)]
#[command(name = "monl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the coupled synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset path (default: paths.dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a denoiser.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// vanilla, pm, pt, ptm, monl or pt/pm/ptm.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<StrategyKind>,
        /// Run directory (default: paths.run_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample one output per held-out example for a task.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint (default: <run_dir>/final.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// joint, a2v, v2a, continue or inpaint.
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long, value_parser = parse_sampler)]
        sampler: Option<SamplerKind>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Guidance weight for --baseline recon-guided.
        #[arg(long)]
        lambda: Option<f64>,
        /// Sample with the raw weights instead of the EMA.
        #[arg(long)]
        raw_weights: bool,
        /// Sample file (default: <samples_dir>/<task>.smpl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score sample files against the held-out split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Directory of sample files (default: paths.samples_dir).
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Report path (default: paths.report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the beta and alpha-bar tables.
    InspectSchedule {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        every: usize,
    },
}

fn parse_sampler(s: &str) -> Result<SamplerKind, CliError> {
    s.parse().map_err(|e: monl::Error| CliError::Usage(e.to_string()))
}

fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            cmd_gen_data(&load(&config, seed)?, out.as_deref())?;
        }
        Command::Train {
            config,
            seed,
            strategy,
            out,
            resume,
        } => {
            let mut cfg = load(&config, seed)?;
            if let Some(s) = strategy {
                cfg.train.optim.strategy = s;
            }
            cmd_train(&cfg, out.as_deref(), resume.as_deref())?;
        }
        Command::Sample {
            config,
            seed,
            checkpoint,
            task,
            guidance,
            sampler,
            steps,
            baseline,
            lambda,
            raw_weights,
            out,
        } => {
            let cfg = load(&config, seed)?;
            let opts = SampleOptions {
                checkpoint,
                out,
                sampler,
                steps,
                guidance,
                baseline,
                lambda,
                raw_weights,
            };
            cmd_sample(&cfg, task, &opts)?;
        }
        Command::Eval { config, samples, out } => {
            cmd_eval(&load(&config, None)?, samples.as_deref(), out.as_deref())?;
        }
        Command::InspectSchedule { config, every } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::desk(Path::new(".")),
            };
            print!("{}", cmd_inspect_schedule(&cfg, every)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
