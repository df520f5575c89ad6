use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::runtime::{Environment, Observation};

pub const ARENA: f64 = 1.0;
pub const V_MAX: f64 = 1.0;
pub const CONTROL_RATE_HZ: f64 = 30.0;
pub const DT: f64 = 1.0 / CONTROL_RATE_HZ;
/// `[agent x, agent y, goal x, goal y, obstacle x, obstacle y, obstacle radius]`
pub const OBS_DIM: usize = 7;
pub const STATE_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    ForkReach,
    MovingTarget,
}

impl TaskKind {
    pub fn instruction_id(self) -> usize {
        match self {
            TaskKind::ForkReach => 0,
            TaskKind::MovingTarget => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fork_reach" | "fork-reach" => Some(TaskKind::ForkReach),
            "moving_target" | "moving-target" => Some(TaskKind::MovingTarget),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ForkReach => "fork_reach",
            TaskKind::MovingTarget => "moving_target",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub success_radius: f64,
    /// Fork-reach: hard tick limit. Moving-target: ticks allowed after the jump.
    pub episode_cap: usize,
    /// Moving-target jump tick is uniform on `[jump_min, jump_max]`.
    pub jump_min: usize,
    pub jump_max: usize,
    pub jump_dist_min: f64,
    pub jump_dist_max: f64,
}

impl TaskSpec {
    pub fn fork_reach() -> Self {
        Self {
            kind: TaskKind::ForkReach,
            success_radius: 0.05,
            episode_cap: 150,
            jump_min: 0,
            jump_max: 0,
            jump_dist_min: 0.0,
            jump_dist_max: 0.0,
        }
    }

    /// Jump tick uniform on `[horizon, 3·horizon]`.
    pub fn moving_target(horizon: usize) -> Self {
        Self {
            kind: TaskKind::MovingTarget,
            success_radius: 0.05,
            episode_cap: 75,
            jump_min: horizon,
            jump_max: 3 * horizon,
            jump_dist_min: 0.6,
            jump_dist_max: 0.9,
        }
    }

    pub fn for_kind(kind: TaskKind, horizon: usize) -> Self {
        match kind {
            TaskKind::ForkReach => Self::fork_reach(),
            TaskKind::MovingTarget => Self::moving_target(horizon),
        }
    }

    /// Longest possible episode.
    pub fn max_ticks(&self) -> usize {
        match self.kind {
            TaskKind::ForkReach => self.episode_cap,
            TaskKind::MovingTarget => self.jump_max.saturating_add(self.episode_cap),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub agent: [f64; 2],
    pub goal: [f64; 2],
    pub obstacle: Option<Obstacle>,
    pub tick: usize,
    pub task: TaskKind,
    pub seed: u64,
    /// Moving-target only: when and where the goal moves.
    pub jump: Option<(usize, [f64; 2])>,
    pub success: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl WorldState {
    pub fn reset(spec: &TaskSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match spec.kind {
            TaskKind::ForkReach => {
                let agent = [rng.random_range(-0.85..-0.65), rng.random_range(-0.05..0.05)];
                let goal = [rng.random_range(0.65..0.85), rng.random_range(-0.05..0.05)];
                Self {
                    agent,
                    goal,
                    obstacle: Some(Obstacle { center: [0.0, 0.0], radius: 0.2 }),
                    tick: 0,
                    task: spec.kind,
                    seed,
                    jump: None,
                    success: false,
                }
            }
            TaskKind::MovingTarget => {
                let agent = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
                let goal = loop {
                    let g = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
                    if dist(g, agent) >= 0.3 {
                        break g;
                    }
                };
                let at = rng.random_range(spec.jump_min..=spec.jump_max);
                let target = loop {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = rng.random_range(spec.jump_dist_min..=spec.jump_dist_max);
                    let t = [goal[0] + r * angle.cos(), goal[1] + r * angle.sin()];
                    if t[0].abs() <= 0.9 && t[1].abs() <= 0.9 {
                        break t;
                    }
                };
                Self { agent, goal, obstacle: None, tick: 0, task: spec.kind, seed, jump: Some((at, target)), success: false }
            }
        }
    }

    pub fn observation(&self) -> Vec<f64> {
        let (c, r) = self.obstacle.map_or(([0.0, 0.0], 0.0), |o| (o.center, o.radius));
        vec![self.agent[0], self.agent[1], self.goal[0], self.goal[1], c[0], c[1], r]
    }

    pub fn jump_tick(&self) -> Option<usize> {
        self.jump.map(|j| j.0)
    }

    fn jumped(&self) -> bool {
        self.jump.is_none_or(|(at, _)| self.tick >= at)
    }

    fn at_goal(&self, spec: &TaskSpec) -> bool {
        dist(self.agent, self.goal) <= spec.success_radius
    }

    fn over_cap(&self, spec: &TaskSpec) -> bool {
        match self.jump {
            Some((at, _)) => self.tick >= at.saturating_add(spec.episode_cap),
            None => self.tick >= spec.episode_cap,
        }
    }

    fn finish(&mut self, spec: &TaskSpec) -> bool {
        if let Some((at, target)) = self.jump {
            if self.tick == at {
                self.goal = target;
            }
        }
        if self.jumped() && self.at_goal(spec) {
            self.success = true;
            return true;
        }
        self.over_cap(spec)
    }

    /// One control tick. Returns whether the episode is over.
    pub fn advance(&mut self, spec: &TaskSpec, action: &[f64]) -> bool {
        if self.jumped() && self.at_goal(spec) {
            self.success = true;
            return true;
        }
        let vx = action[0].clamp(-V_MAX, V_MAX);
        let vy = action[1].clamp(-V_MAX, V_MAX);
        let mut p = [
            (self.agent[0] + vx * DT).clamp(-ARENA, ARENA),
            (self.agent[1] + vy * DT).clamp(-ARENA, ARENA),
        ];
        if let Some(o) = self.obstacle {
            let d = dist(p, o.center);
            if d < o.radius {
                if d > 0.0 {
                    let s = o.radius / d;
                    p = [o.center[0] + (p[0] - o.center[0]) * s, o.center[1] + (p[1] - o.center[1]) * s];
                } else {
                    p = self.agent;
                }
            }
        }
        self.agent = p;
        self.tick += 1;
        self.finish(spec)
    }

    /// Idle tick: the agent holds its position.
    pub fn hold(&mut self, spec: &TaskSpec) -> bool {
        self.advance(spec, &[0.0, 0.0])
    }
}

/// Pure form of [`WorldState::advance`].
pub fn step(spec: &TaskSpec, state: &WorldState, action: &[f64]) -> (WorldState, bool) {
    let mut s = state.clone();
    let done = s.advance(spec, action);
    (s, done)
}

/// A [`WorldState`] driven through the runtime's environment interface.
#[derive(Clone, Debug)]
pub struct SimEnv {
    pub spec: TaskSpec,
    pub state: WorldState,
}

impl SimEnv {
    pub fn new(spec: TaskSpec, seed: u64) -> Self {
        let state = WorldState::reset(&spec, seed);
        Self { spec, state }
    }
}

impl Environment for SimEnv {
    fn observe(&self) -> Observation {
        Observation {
            tick: self.state.tick,
            features: self.state.observation(),
            state: self.state.agent.to_vec(),
            instruction_id: self.state.task.instruction_id(),
        }
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn apply(&mut self, action: &[f64]) -> bool {
        self.state.advance(&self.spec, action)
    }

    fn hold(&mut self) -> bool {
        self.state.hold(&self.spec)
    }
}
