use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::Result;

use super::buffer::{ActiveChunk, ChunkBuffer, PendingChunk};
use super::schedule::{ScheduleConfig, validate_schedule, validate_sync};
use super::trace::{InferenceRecord, RolloutTrace, TickEvent, TickRecord};

/// Synchronized sensor frame handed to the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub tick: usize,
    pub features: Vec<f64>,
    pub state: Vec<f64>,
    pub instruction_id: usize,
}

pub trait Environment {
    fn observe(&self) -> Observation;
    fn action_dim(&self) -> usize;
    /// Executes one commanded action; returns whether the episode is over.
    fn apply(&mut self, action: &[f64]) -> bool;
    /// Idle tick: the robot holds its position.
    fn hold(&mut self) -> bool;
}

pub trait ChunkPolicy {
    /// A `T × A` chunk whose first `prefix.rows()` rows should agree with
    /// `prefix`.
    fn infer(&mut self, obs: &Observation, prefix: &Tensor) -> Result<Tensor>;

    /// Ticks until the chunk of the current request is available.
    fn latency_ticks(&mut self, nominal: usize) -> usize {
        nominal
    }
}

impl<P: ChunkPolicy + ?Sized> ChunkPolicy for &mut P {
    fn infer(&mut self, obs: &Observation, prefix: &Tensor) -> Result<Tensor> {
        (**self).infer(obs, prefix)
    }

    fn latency_ticks(&mut self, nominal: usize) -> usize {
        (**self).latency_ticks(nominal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sync,
    Async,
}

impl ExecMode {
    pub fn name(self) -> &'static str {
        match self {
            ExecMode::Sync => "sync",
            ExecMode::Async => "async",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ExecMode::Sync, ExecMode::Async].into_iter().find(|m| m.name() == s)
    }
}

/// [`sync_rollout`] or [`async_rollout`].
pub fn rollout<P, E>(mode: ExecMode, policy: &mut P, env: &mut E, cfg: &ScheduleConfig, episode_ticks: usize) -> Result<RolloutTrace>
where
    P: ChunkPolicy + ?Sized,
    E: Environment + ?Sized,
{
    match mode {
        ExecMode::Sync => sync_rollout(policy, env, cfg, episode_ticks),
        ExecMode::Async => async_rollout(policy, env, cfg, episode_ticks),
    }
}

struct Latency {
    nominal: usize,
    rng: Option<ChaCha8Rng>,
}

impl Latency {
    fn new(cfg: &ScheduleConfig) -> Self {
        Self { nominal: cfg.latency_ticks, rng: cfg.jitter.then(|| ChaCha8Rng::seed_from_u64(cfg.jitter_seed)) }
    }

    fn draw<P: ChunkPolicy + ?Sized>(&mut self, policy: &mut P) -> usize {
        let base = match &mut self.rng {
            Some(rng) if self.nominal > 0 => rng.random_range(self.nominal - 1..=self.nominal),
            _ => self.nominal,
        };
        policy.latency_ticks(base)
    }
}

fn exec_record(tick: usize, action: &[f64], chunk: &ActiveChunk, pos: usize, event: TickEvent) -> TickRecord {
    TickRecord { tick, action: action.to_vec(), chunk_id: Some(chunk.id), chunk_pos: Some(pos), event }
}

/// Executes `T_e` actions per chunk, then holds still for the inference
/// latency while the next chunk is computed from the observation at that
/// tick. The first chunk is ready at tick 0.
pub fn sync_rollout<P, E>(policy: &mut P, env: &mut E, cfg: &ScheduleConfig, episode_ticks: usize) -> Result<RolloutTrace>
where
    P: ChunkPolicy + ?Sized,
    E: Environment + ?Sized,
{
    validate_sync(cfg)?;
    let a = env.action_dim();
    let empty = Tensor::zeros(&[0, a]);
    let mut latency = Latency::new(cfg);
    let mut trace = RolloutTrace::new(a);
    let first = policy.infer(&env.observe(), &empty)?;
    trace.inferences.push(InferenceRecord::new(0, 0, 0, 0, empty.clone(), first.clone()));
    let mut active = ActiveChunk { id: 0, actions: first, start_tick: 0 };
    let mut tick = 0;
    let mut event = TickEvent::Complete;
    loop {
        for pos in 0..cfg.exec_steps {
            if tick >= episode_ticks {
                return Ok(trace);
            }
            let row = active.actions.row_slice(pos).to_vec();
            let done = env.apply(&row);
            trace.push(exec_record(tick, &row, &active, pos, event));
            event = TickEvent::Exec;
            tick += 1;
            if done {
                trace.done = true;
                return Ok(trace);
            }
        }
        let trigger = tick;
        let obs = env.observe();
        let next = policy.infer(&obs, &empty)?;
        let lat = latency.draw(policy);
        for _ in 0..lat {
            if tick >= episode_ticks {
                return Ok(trace);
            }
            let done = env.hold();
            trace.push(TickRecord { tick, action: vec![0.0; a], chunk_id: None, chunk_pos: None, event: TickEvent::Idle });
            tick += 1;
            if done {
                trace.done = true;
                return Ok(trace);
            }
        }
        let id = active.id + 1;
        trace.inferences.push(InferenceRecord::new(id, trigger, tick, tick, empty.clone(), next.clone()));
        active = ActiveChunk { id, actions: next, start_tick: tick };
        trace.boundaries.push(tick);
        event = TickEvent::Complete;
    }
}

/// Overlaps inference with execution. At position `T_e` of the active chunk
/// the next inference starts with prefix = positions `[T_e, T_e + Δt_c)`;
/// the new chunk's position 0 is aligned with the trigger tick and it takes
/// over once its latency has elapsed.
pub fn async_rollout<P, E>(policy: &mut P, env: &mut E, cfg: &ScheduleConfig, episode_ticks: usize) -> Result<RolloutTrace>
where
    P: ChunkPolicy + ?Sized,
    E: Environment + ?Sized,
{
    validate_schedule(cfg)?;
    let a = env.action_dim();
    let mut latency = Latency::new(cfg);
    let mut trace = RolloutTrace::new(a);
    let empty = Tensor::zeros(&[0, a]);
    let first = policy.infer(&env.observe(), &empty)?;
    trace.inferences.push(InferenceRecord::new(0, 0, 0, 0, empty, first.clone()));
    let mut buffer = ChunkBuffer::new(ActiveChunk { id: 0, actions: first, start_tick: 0 });
    let mut next_id = 1;

    for tick in 0..episode_ticks {
        let mut event = if tick == 0 { TickEvent::Complete } else { TickEvent::Exec };
        if buffer.promote(tick) {
            event = TickEvent::Complete;
            trace.boundaries.push(tick);
        }
        if buffer.pending().is_none() && buffer.active().position(tick) == Some(cfg.exec_steps) {
            let active = buffer.active();
            let c = a * cfg.prefix_len;
            let off = cfg.exec_steps * a;
            let prefix = Tensor::new(&[cfg.prefix_len, a], active.actions.data()[off..off + c].to_vec())?;
            let obs = env.observe();
            let chunk = policy.infer(&obs, &prefix)?;
            let lat = latency.draw(policy);
            trace.inferences.push(InferenceRecord::new(next_id, tick, tick + lat, tick, prefix, chunk.clone()));
            buffer.submit(PendingChunk {
                chunk: ActiveChunk { id: next_id, actions: chunk, start_tick: tick },
                ready_tick: tick + lat,
            })?;
            next_id += 1;
            if event != TickEvent::Complete {
                event = TickEvent::Trigger;
            }
            if buffer.promote(tick) {
                event = TickEvent::Complete;
                trace.boundaries.push(tick);
            }
        }
        let (row, pos) = match buffer.action_at(tick) {
            Ok((row, pos)) => (row.to_vec(), pos),
            Err(_) => {
                trace.fault = Some(tick);
                return Ok(trace);
            }
        };
        let done = env.apply(&row);
        trace.push(exec_record(tick, &row, buffer.active(), pos, event));
        if done {
            trace.done = true;
            break;
        }
    }
    Ok(trace)
}
