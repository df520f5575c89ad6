//! INI-style run configuration.
//!
//! ```text
//! # comment
//! [flow]
//! window = 6
//! [runtime]
//! latency_ticks = 3
//! ```
//! Every key lives in a section; unknown sections and keys are errors.

use std::str::FromStr;

use crate::conditioner::ConditionerConfig;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, KvSource};
use crate::nn::MaskSpec;
use crate::policy::PolicyConfig;
use crate::runtime::ScheduleConfig;
use crate::simworld::{OBS_DIM, STATE_DIM, TaskKind, TaskSpec};
use crate::training::{PostMask, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub task: TaskKind,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub vocab: usize,
    pub candidates: usize,
    pub score_weight: f64,
    pub seed: u64,
}

/// Attention pattern used when sampling chunks at rollout time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMask {
    /// Whatever post-training used (`train.post_mask`).
    Post,
    /// Plain causal attention; only valid without a prefix.
    Causal,
}

/// Which head drives the rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Flow,
    Choice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSettings {
    pub task: TaskKind,
    pub episodes: usize,
    pub seed: u64,
    pub use_prefix: bool,
    pub mask: RolloutMask,
    pub head: Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSettings,
    pub model: ModelSettings,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    /// `horizon` is ignored here; [`RunConfig::schedule`] takes it from `flow`.
    pub runtime: ScheduleConfig,
    pub rollout: RolloutSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSettings { task: TaskKind::ForkReach, episodes: 2000, seed: 0 },
            model: ModelSettings { vocab: 2, candidates: 4, score_weight: 0.1, seed: 0 },
            flow: FlowConfig::default(),
            train: TrainConfig::default(),
            runtime: ScheduleConfig::default(),
            rollout: RolloutSettings {
                task: TaskKind::ForkReach,
                episodes: 20,
                seed: 0,
                use_prefix: true,
                mask: RolloutMask::Post,
                head: Head::Flow,
            },
        }
    }
}

impl RunConfig {
    pub fn policy_config(&self) -> PolicyConfig {
        let f = &self.flow;
        let conditioner = ConditionerConfig {
            obs_dim: OBS_DIM,
            state_dim: f.state_dim,
            action_dim: f.action_dim,
            horizon: f.horizon,
            vocab: self.model.vocab,
            model_dim: f.model_dim,
            head_count: f.head_count,
            layer_count: f.layer_count,
            mlp_hidden: f.mlp_hidden,
            candidates: self.model.candidates,
            score_weight: self.model.score_weight,
        };
        PolicyConfig { conditioner, flow: FlowConfig { state_dim: STATE_DIM, ..f.clone() } }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig { horizon: self.flow.horizon, ..self.runtime.clone() }
    }

    pub fn rollout_mask(&self) -> MaskSpec {
        match self.rollout.mask {
            RolloutMask::Post => self.train.post_mask.spec(self.flow.window, self.flow.horizon),
            RolloutMask::Causal => MaskSpec::causal(),
        }
    }

    pub fn task_spec(&self, kind: TaskKind) -> TaskSpec {
        TaskSpec::for_kind(kind, self.flow.horizon)
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        fn num<T: FromStr>(v: &str, line: usize) -> Result<T> {
            v.parse().map_err(|_| Error::Parse { line, msg: format!("cannot parse `{v}`") })
        }
        fn flag(v: &str, line: usize) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::Parse { line, msg: format!("expected a boolean, got `{v}`") }),
            }
        }
        fn pick<T>(v: &str, line: usize, parsed: Option<T>, expected: &str) -> Result<T> {
            parsed.ok_or_else(|| Error::Parse { line, msg: format!("expected {expected}, got `{v}`") })
        }
        let task = |v: &str| pick(v, line, TaskKind::parse(v), "fork_reach or moving_target");
        let v = value;
        match (section, key) {
            ("data", "task") => self.data.task = task(v)?,
            ("data", "episodes") => self.data.episodes = num(v, line)?,
            ("data", "seed") => self.data.seed = num(v, line)?,

            ("model", "vocab") => self.model.vocab = num(v, line)?,
            ("model", "candidates") => self.model.candidates = num(v, line)?,
            ("model", "score_weight") => self.model.score_weight = num(v, line)?,
            ("model", "seed") => self.model.seed = num(v, line)?,
            ("model", "model_dim") | ("flow", "model_dim") => self.flow.model_dim = num(v, line)?,
            ("model", "head_count") | ("flow", "head_count") => self.flow.head_count = num(v, line)?,
            ("model", "layer_count") | ("flow", "layer_count") => self.flow.layer_count = num(v, line)?,
            ("model", "mlp_hidden") | ("flow", "mlp_hidden") => self.flow.mlp_hidden = num(v, line)?,

            ("flow", "horizon") => self.flow.horizon = num(v, line)?,
            ("flow", "action_dim") => self.flow.action_dim = num(v, line)?,
            ("flow", "window") => self.flow.window = num(v, line)?,
            ("flow", "rope_offset") => self.flow.rope_offset = num(v, line)?,
            ("flow", "tau_max") => self.flow.tau_max = num(v, line)?,
            ("flow", "tau_alpha") => self.flow.tau_alpha = num(v, line)?,
            ("flow", "tau_beta") => self.flow.tau_beta = num(v, line)?,
            ("flow", "sample_steps") => self.flow.sample_steps = num(v, line)?,
            ("flow", "kv_source") => {
                self.flow.kv_source = pick(
                    v,
                    line,
                    match v {
                        "embeddings" => Some(KvSource::Embeddings),
                        "hidden" => Some(KvSource::Hidden),
                        _ => None,
                    },
                    "embeddings or hidden",
                )?
            }

            ("train", "steps") => self.train.steps = num(v, line)?,
            ("train", "batch") => self.train.batch = num(v, line)?,
            ("train", "lr") => self.train.lr = num(v, line)?,
            ("train", "warmup") => self.train.warmup = num(v, line)?,
            ("train", "weight_decay") => self.train.adam.weight_decay = num(v, line)?,
            ("train", "beta1") => self.train.adam.beta1 = num(v, line)?,
            ("train", "beta2") => self.train.adam.beta2 = num(v, line)?,
            ("train", "eps") => self.train.adam.eps = num(v, line)?,
            ("train", "grad_clip") => self.train.grad_clip = num(v, line)?,
            ("train", "seed") => self.train.seed = num(v, line)?,
            ("train", "max_prefix") => self.train.max_prefix = num(v, line)?,
            ("train", "reweight") => self.train.reweight_enabled = flag(v, line)?,
            ("train", "reweight_lambda") => self.train.reweight.lambda = num(v, line)?,
            ("train", "reweight_max") => self.train.reweight.max_weight = num(v, line)?,
            ("train", "post_mask") => {
                self.train.post_mask = pick(v, line, PostMask::parse(v), "lambda or causal_prefix")?
            }
            ("train", "freeze_conditioner") => self.train.freeze_conditioner = flag(v, line)?,
            ("train", "log_every") => self.train.log_every = num(v, line)?,

            ("runtime", "exec_steps") => self.runtime.exec_steps = num(v, line)?,
            ("runtime", "prefix_len") => self.runtime.prefix_len = num(v, line)?,
            ("runtime", "latency_ticks") => self.runtime.latency_ticks = num(v, line)?,
            ("runtime", "control_rate_hz") => self.runtime.control_rate_hz = num(v, line)?,
            ("runtime", "jitter") => self.runtime.jitter = flag(v, line)?,
            ("runtime", "jitter_seed") => self.runtime.jitter_seed = num(v, line)?,

            ("rollout", "task") => self.rollout.task = task(v)?,
            ("rollout", "episodes") => self.rollout.episodes = num(v, line)?,
            ("rollout", "seed") => self.rollout.seed = num(v, line)?,
            ("rollout", "use_prefix") => self.rollout.use_prefix = flag(v, line)?,
            ("rollout", "mask") => {
                self.rollout.mask = pick(
                    v,
                    line,
                    match v {
                        "post" => Some(RolloutMask::Post),
                        "causal" => Some(RolloutMask::Causal),
                        _ => None,
                    },
                    "post or causal",
                )?
            }
            ("rollout", "head") => {
                self.rollout.head = pick(
                    v,
                    line,
                    match v {
                        "flow" => Some(Head::Flow),
                        "choice" => Some(Head::Choice),
                        _ => None,
                    },
                    "flow or choice",
                )?
            }
            _ => return Err(Error::UnknownKey { key: format!("{section}.{key}"), line }),
        }
        Ok(())
    }
}

const SECTIONS: [&str; 6] = ["data", "model", "flow", "train", "runtime", "rollout"];

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        if let Some(name) = s.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse { line, msg: "unterminated section header".into() })?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::UnknownKey { key: format!("[{name}]"), line });
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) =
            s.split_once('=').ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got `{s}`") })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Parse { line, msg: "empty key".into() });
        }
        let sec = section.as_deref().ok_or_else(|| Error::Parse { line, msg: format!("`{key}` outside any section") })?;
        cfg.set(sec, key, value, line)?;
    }
    Ok(cfg)
}
