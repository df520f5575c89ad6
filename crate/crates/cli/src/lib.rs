//! Command-line front end: data generation, the three training stages,
//! rollouts, evaluation and mask inspection.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chunkflow::nn::{MaskSpec, TokenLayout, build_mask};
use chunkflow::policy::{ChoicePolicy, FlowPolicy, Policy};
use chunkflow::runtime::{ChunkPolicy, ExecMode, RolloutTrace};
use chunkflow::simworld::{TaskKind, evaluate, generate_dataset, run_episodes};
use chunkflow::storage::{Dataset, Head, RunConfig, load_checkpoint, parse_config, save_checkpoint};
use chunkflow::training::{Stage, train, write_log_csv};
use chunkflow::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "chunkflow", about = "Chunked flow-matching policies on simulated reaching tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Task {
    ForkReach,
    MovingTarget,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::ForkReach => TaskKind::ForkReach,
            Task::MovingTarget => TaskKind::MovingTarget,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Sync,
    Async,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Recipe {
    Async,
    Sync,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Kind {
    Causal,
    Lambda,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Training log (CSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Scripted-expert demonstrations.
    GenData {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Only `flow.horizon` is read (it sets the moving-target jump window).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stage 1: multi-candidate head on the conditioner.
    Pretrain1(TrainArgs),
    /// Stage 2: action expert with the conditioner frozen.
    Pretrain2(TrainArgs),
    /// Prefix-conditioned (async) or prefix-free (sync) fine-tuning.
    Posttrain {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long, value_enum, default_value = "async")]
        recipe: Recipe,
    },
    /// Closed-loop episodes; writes one trace CSV.
    Rollout {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        trace_out: PathBuf,
        #[arg(long, value_enum)]
        task: Option<Task>,
        /// Overrides `rollout.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replays traces and writes a JSON metrics report.
    Eval {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        report_out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Prints an attention mask as a grid of 1 (visible) and . (masked).
    DumpMask {
        #[arg(long = "T")]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        prefix: usize,
        #[arg(long, default_value_t = 1)]
        window: usize,
        #[arg(long, value_enum)]
        kind: Kind,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => parse_config(&std::fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn load_policy(cfg: &RunConfig, ckpt: &Path) -> Result<Policy> {
    Policy::from_checkpoint(cfg.policy_config(), &load_checkpoint(ckpt)?)
}

fn run_training(a: &TrainArgs, stage: Stage, err: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let data = Dataset::load(&a.data)?;
    let mut policy = match &a.init {
        Some(p) => load_policy(&cfg, p)?,
        None if stage == Stage::Choice => Policy::new(cfg.policy_config(), cfg.model.seed)?,
        None => return Err(Error::Config(format!("stage {} needs --init <checkpoint>", stage.name()))),
    };
    let rows = train(&mut policy, &data, stage, &cfg.train, |r| {
        let _ = writeln!(err, "step {} loss {:.5} lr {:.2e}", r.step, r.loss, r.lr);
    })?;
    if let Some(p) = &a.log {
        let mut w = BufWriter::new(File::create(p)?);
        write_log_csv(&mut w, &rows)?;
        w.flush()?;
    }
    save_checkpoint(&a.out, &policy.checkpoint())
}

/// Runs one command; `out` receives normal output, `err` diagnostics.
pub fn execute(cmd: &Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData { task, episodes, seed, out: path, config } => {
            let cfg = load_config(config.as_deref())?;
            let data = generate_dataset(&cfg.task_spec((*task).into()), *episodes, *seed)?;
            data.save(path)?;
            writeln!(out, "wrote {} episodes, {} steps", data.episodes.len(), data.total_steps())?;
        }
        Command::Pretrain1(a) => run_training(a, Stage::Choice, err)?,
        Command::Pretrain2(a) => run_training(a, Stage::Flow, err)?,
        Command::Posttrain { args, recipe } => {
            let stage = match recipe {
                Recipe::Async => Stage::PostAsync,
                Recipe::Sync => Stage::PostSync,
            };
            run_training(args, stage, err)?
        }
        Command::Rollout { mode, ckpt, config, episodes, trace_out, task, seed } => {
            let cfg = load_config(config.as_deref())?;
            let mode = match mode {
                Mode::Sync => ExecMode::Sync,
                Mode::Async => ExecMode::Async,
            };
            let schedule = cfg.schedule();
            if mode == ExecMode::Async {
                chunkflow::runtime::validate_schedule(&schedule)?;
            }
            let policy = load_policy(&cfg, ckpt)?;
            let kind = task.map(TaskKind::from).unwrap_or(cfg.rollout.task);
            let spec = cfg.task_spec(kind);
            let seed = seed.unwrap_or(cfg.rollout.seed);
            let n = episodes.unwrap_or(cfg.rollout.episodes);
            let mut runner: Box<dyn ChunkPolicy> = match cfg.rollout.head {
                Head::Flow => Box::new(FlowPolicy::new(&policy, cfg.rollout_mask(), cfg.rollout.use_prefix, seed)),
                Head::Choice => Box::new(ChoicePolicy { policy: &policy }),
            };
            let traces = run_episodes(runner.as_mut(), &spec, &schedule, mode, n, seed)?;
            let mut w = BufWriter::new(File::create(trace_out)?);
            writeln!(w, "{}", RolloutTrace::csv_header(cfg.flow.action_dim))?;
            for (i, (s, t)) in traces.iter().enumerate() {
                t.write_csv(&mut w, i, *s)?;
            }
            w.flush()?;
            let successes = traces.iter().filter(|(_, t)| t.done).count();
            writeln!(out, "{n} episodes, {successes} ended before the tick cap")?;
        }
        Command::Eval { traces, task, report_out, config } => {
            let cfg = load_config(config.as_deref())?;
            let parsed = RolloutTrace::read_csv(&std::fs::read_to_string(traces)?)?;
            if parsed.is_empty() {
                return Err(Error::Config("trace file holds no episodes".into()));
            }
            let seeded: Vec<(u64, RolloutTrace)> = parsed.into_iter().map(|(_, s, t)| (s, t)).collect();
            let report = evaluate(&seeded, &cfg.task_spec((*task).into()))?;
            std::fs::write(report_out, report.to_json())?;
            writeln!(out, "{}", report.to_json())?;
        }
        Command::DumpMask { horizon, prefix, window, kind } => {
            if prefix > horizon {
                return Err(Error::Config(format!("prefix {prefix} exceeds T = {horizon}")));
            }
            let spec = match kind {
                Kind::Causal => MaskSpec::causal(),
                Kind::Lambda => MaskSpec::lambda(*window),
            };
            let mask = build_mask(&TokenLayout::new(*prefix, horizon - prefix), &spec)?;
            write!(out, "{}", mask.to_ascii())?;
        }
    }
    Ok(())
}

/// Parses `argv` and runs it. Exit codes: 0 success, 1 usage error,
/// 2 runtime fault.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match execute(&cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}
