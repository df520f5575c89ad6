//! Tick-accurate chunk execution on a logical clock.
//!
//! A policy produces `T`-step action chunks. The executor consumes exactly
//! one action per tick. In synchronous mode the robot holds still while the
//! next chunk is computed; in asynchronous mode inference overlaps execution
//! and the new chunk is spliced in once it arrives.

mod buffer;
mod resample;
mod rollout;
mod schedule;
mod trace;
mod wallclock;

pub use buffer::{ActiveChunk, ChunkBuffer, PendingChunk};
pub use resample::{Frame, SensorStream, resample};
pub use rollout::{ChunkPolicy, Environment, ExecMode, Observation, async_rollout, rollout, sync_rollout};
pub use schedule::{ScheduleConfig, validate_schedule};
pub use trace::{InferenceRecord, RolloutTrace, StitchStats, TickEvent, TickRecord, stitch_metrics};
pub use wallclock::wallclock_async_rollout;
