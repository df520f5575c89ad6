use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

use super::buffer::{ActiveChunk, ChunkBuffer, PendingChunk};
use super::rollout::{ChunkPolicy, Environment, Observation};
use super::schedule::{ScheduleConfig, validate_schedule};
use super::trace::{InferenceRecord, RolloutTrace, TickEvent, TickRecord};

/// Asynchronous execution against the real clock, for demos. Inference runs
/// on a worker thread; the executor never waits for it. Latency is whatever
/// the policy actually takes, so traces are not reproducible.
pub fn wallclock_async_rollout<P, E>(policy: &mut P, env: &mut E, cfg: &ScheduleConfig, episode_ticks: usize) -> Result<RolloutTrace>
where
    P: ChunkPolicy + Send + ?Sized,
    E: Environment + ?Sized,
{
    validate_schedule(cfg)?;
    let a = env.action_dim();
    let period = Duration::from_secs_f64(cfg.tick_seconds());
    let mut trace = RolloutTrace::new(a);
    let empty = Tensor::zeros(&[0, a]);
    let first = policy.infer(&env.observe(), &empty)?;
    trace.inferences.push(InferenceRecord::new(0, 0, 0, 0, empty, first.clone()));

    let (req_tx, req_rx) = mpsc::sync_channel::<(Observation, Tensor)>(1);
    let (resp_tx, resp_rx) = mpsc::sync_channel::<Result<Tensor>>(1);
    thread::scope(|scope| {
        scope.spawn(move || {
            while let Ok((obs, prefix)) = req_rx.recv() {
                if resp_tx.send(policy.infer(&obs, &prefix)).is_err() {
                    break;
                }
            }
        });

        let mut buffer = ChunkBuffer::new(ActiveChunk { id: 0, actions: first, start_tick: 0 });
        let mut in_flight: Option<(usize, Tensor)> = None;
        let mut next_id = 1;
        let clock = Instant::now();
        for tick in 0..episode_ticks {
            let due = period * tick as u32;
            if let Some(wait) = due.checked_sub(clock.elapsed()) {
                thread::sleep(wait);
            }
            let mut event = if tick == 0 { TickEvent::Complete } else { TickEvent::Exec };
            if let Some((trigger, prefix)) = &in_flight {
                if let Ok(chunk) = resp_rx.try_recv() {
                    let chunk = chunk?;
                    trace.inferences.push(InferenceRecord::new(next_id, *trigger, tick, *trigger, prefix.clone(), chunk.clone()));
                    buffer.submit(PendingChunk {
                        chunk: ActiveChunk { id: next_id, actions: chunk, start_tick: *trigger },
                        ready_tick: tick,
                    })?;
                    next_id += 1;
                    in_flight = None;
                }
            }
            if buffer.promote(tick) {
                event = TickEvent::Complete;
                trace.boundaries.push(tick);
            }
            if in_flight.is_none() && buffer.pending().is_none() && buffer.active().position(tick) == Some(cfg.exec_steps) {
                let off = cfg.exec_steps * a;
                let data = buffer.active().actions.data()[off..off + cfg.prefix_len * a].to_vec();
                let prefix = Tensor::new(&[cfg.prefix_len, a], data)?;
                req_tx
                    .send((env.observe(), prefix.clone()))
                    .map_err(|_| Error::Config("inference worker stopped".into()))?;
                in_flight = Some((tick, prefix));
                if event != TickEvent::Complete {
                    event = TickEvent::Trigger;
                }
            }
            let Ok((row, pos)) = buffer.action_at(tick) else {
                trace.fault = Some(tick);
                break;
            };
            let row = row.to_vec();
            let done = env.apply(&row);
            let id = buffer.active().id;
            trace.push(TickRecord { tick, action: row, chunk_id: Some(id), chunk_pos: Some(pos), event });
            if done {
                trace.done = true;
                break;
            }
        }
        drop(req_tx);
        Ok(trace)
    })
}
