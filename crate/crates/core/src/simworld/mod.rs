//! Two small point-mass tasks on the arena `[−1, 1]²` at 30 Hz.
//!
//! *Fork-reach*: go around a disc obstacle to a goal on the far side. The
//! expert picks the upper or lower way at random and the choice is not
//! observable, so demonstrations are bimodal.
//!
//! *Moving-target*: reach a goal that jumps once, some time after the
//! episode starts. Success requires reacting to the jump.

use crate::error::Result;
use crate::runtime::{ChunkPolicy, ExecMode, RolloutTrace, ScheduleConfig, rollout};

mod env;
mod expert;
mod metrics;

pub use env::{
    ARENA, CONTROL_RATE_HZ, DT, Obstacle, OBS_DIM, STATE_DIM, SimEnv, TaskKind, TaskSpec, V_MAX, WorldState, step,
};
pub use expert::{ExpertPolicy, Mode, TAIL_TICKS, expert_action, generate_dataset, generate_episodes, run_expert};
pub use metrics::{MetricsReport, ReplayOutcome, evaluate, replay};

/// Runs `episodes` episodes of `spec`, episode `i` from
/// `episode_seed(seed, i)`, and returns each trace with its seed.
pub fn run_episodes<P: ChunkPolicy + ?Sized>(
    policy: &mut P,
    spec: &TaskSpec,
    schedule: &ScheduleConfig,
    mode: ExecMode,
    episodes: usize,
    seed: u64,
) -> Result<Vec<(u64, RolloutTrace)>> {
    (0..episodes)
        .map(|i| {
            let s = episode_seed(seed, i);
            let mut env = SimEnv::new(spec.clone(), s);
            rollout(mode, policy, &mut env, schedule, spec.max_ticks()).map(|t| (s, t))
        })
        .collect()
}

/// Seed of episode `index` in a run started from `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}
