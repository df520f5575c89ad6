use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::runtime::{ChunkPolicy, Observation};
use crate::storage::{Dataset, Episode};

use super::env::{CONTROL_RATE_HZ, OBS_DIM, Obstacle, STATE_DIM, TaskKind, TaskSpec, WorldState};
use super::episode_seed;

/// Which side of the obstacle the fork-reach expert passes on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Up,
    Down,
}

const CRUISE: f64 = 0.8;
const GAIN: f64 = 4.0;
/// Height of the arc's apex above (or below) the obstacle centre.
const APEX: f64 = 0.35;
/// Pull back onto the arc per unit of radial error.
const RADIAL_GAIN: f64 = 4.0;

/// Unit direction along the fork-reach arc: the circle through the apex and
/// the goal, symmetric about the obstacle's vertical axis, traversed towards
/// the goal, plus a correction towards the circle.
fn arc_heading(p: [f64; 2], goal: [f64; 2], o: &Obstacle, mode: Mode) -> [f64; 2] {
    let side = if mode == Mode::Up { 1.0 } else { -1.0 };
    let apex = o.center[1] + side * APEX;
    let dx = goal[0] - o.center[0];
    let cy = (apex * apex - dx * dx - goal[1] * goal[1]) / (2.0 * (apex - goal[1]));
    let radius = (apex - cy).abs();
    let (rx, ry) = (p[0] - o.center[0], p[1] - cy);
    let dist = rx.hypot(ry);
    let (ux, uy) = (rx / dist, ry / dist);
    // clockwise over the top, anticlockwise underneath
    let (tx, ty) = (side * uy, -side * ux);
    let k = RADIAL_GAIN * (radius - dist);
    [tx + k * ux, ty + k * uy]
}

/// Fork-reach: follow an arc over or under the obstacle until past its
/// centre line, then head for the goal. Moving-target: head for the current
/// goal. Speed is `min(0.8, 4 · distance to goal)`.
pub fn expert_action(state: &WorldState, mode: Mode) -> [f64; 2] {
    let g = state.goal;
    let p = state.agent;
    let (dx, dy) = match (state.task, state.obstacle) {
        (TaskKind::ForkReach, Some(o)) if p[0] < o.center[0] => {
            let h = arc_heading(p, g, &o, mode);
            (h[0], h[1])
        }
        _ => (g[0] - p[0], g[1] - p[1]),
    };
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return [0.0, 0.0];
    }
    let goal_dist = ((g[0] - p[0]).powi(2) + (g[1] - p[1]).powi(2)).sqrt();
    let speed = CRUISE.min(GAIN * goal_dist);
    [speed * dx / len, speed * dy / len]
}

/// Runs the expert until the episode ends; returns the final state.
pub fn run_expert(spec: &TaskSpec, seed: u64, mode: Mode) -> WorldState {
    let mut s = WorldState::reset(spec, seed);
    while !s.advance(spec, &expert_action(&s, mode)) {}
    s
}

fn draw_mode(ep_seed: u64) -> Mode {
    let mut rng = ChaCha8Rng::seed_from_u64(ep_seed ^ 0x5eed_f0e4);
    if rng.random_bool(0.5) { Mode::Up } else { Mode::Down }
}

/// Ticks of expert commands recorded after a successful episode ends, so that
/// chunks sampled near the goal show the approach continuing rather than a
/// hard stop.
pub const TAIL_TICKS: usize = 30;

/// Expert demonstrations with the mode used for each (fork-reach only).
/// Successful episodes carry [`TAIL_TICKS`] extra steps past the goal.
pub fn generate_episodes(spec: &TaskSpec, episodes: usize, seed: u64) -> Result<Vec<(Episode, Option<Mode>)>> {
    if episodes == 0 {
        return Err(Error::Config("need at least one episode".into()));
    }
    let mut out = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let es = episode_seed(seed, i);
        let mode = draw_mode(es);
        let mut s = WorldState::reset(spec, es);
        let mut ep = Episode::new(spec.kind.instruction_id());
        loop {
            let a = expert_action(&s, mode);
            ep.push(&s.observation(), &s.agent, &a);
            if s.advance(spec, &a) {
                break;
            }
        }
        if s.success {
            let free = TaskSpec { success_radius: 0.0, episode_cap: usize::MAX, ..spec.clone() };
            for _ in 0..TAIL_TICKS {
                let a = expert_action(&s, mode);
                ep.push(&s.observation(), &s.agent, &a);
                s.advance(&free, &a);
            }
        }
        out.push((ep, (spec.kind == TaskKind::ForkReach).then_some(mode)));
    }
    Ok(out)
}

pub fn generate_dataset(spec: &TaskSpec, episodes: usize, seed: u64) -> Result<Dataset> {
    let eps = generate_episodes(spec, episodes, seed)?;
    Ok(Dataset {
        obs_dim: OBS_DIM,
        state_dim: STATE_DIM,
        action_dim: 2,
        rate_hz: CONTROL_RATE_HZ as u16,
        episodes: eps.into_iter().map(|(e, _)| e).collect(),
    })
}

/// Scripted chunk policy: plans `horizon` expert steps from the observation
/// alone (it does not know about future goal jumps). Honours the prefix.
#[derive(Clone, Debug)]
pub struct ExpertPolicy {
    pub spec: TaskSpec,
    pub horizon: usize,
    pub mode: Mode,
}

impl ChunkPolicy for ExpertPolicy {
    fn infer(&mut self, obs: &Observation, prefix: &Tensor) -> Result<Tensor> {
        let f = &obs.features;
        let mut s = WorldState {
            agent: [f[0], f[1]],
            goal: [f[2], f[3]],
            obstacle: (f[6] > 0.0).then_some(Obstacle { center: [f[4], f[5]], radius: f[6] }),
            tick: 0,
            task: self.spec.kind,
            seed: 0,
            jump: None,
            success: false,
        };
        let plan = TaskSpec { episode_cap: usize::MAX, ..self.spec.clone() };
        let mut rows = Vec::with_capacity(self.horizon * 2);
        for t in 0..self.horizon {
            let a = if t < prefix.rows() {
                [prefix.at(t, 0), prefix.at(t, 1)]
            } else {
                expert_action(&s, self.mode)
            };
            rows.extend_from_slice(&a);
            s.advance(&plan, &a);
        }
        Tensor::new(&[self.horizon, 2], rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::V_MAX;

    #[test]
    fn modes_are_mirror_images() {
        let spec = TaskSpec::fork_reach();
        let mut up = WorldState::reset(&spec, 0);
        up.agent = [-0.75, 0.0];
        up.goal = [0.75, 0.0];
        let mut down = up.clone();
        for _ in 0..120 {
            let au = expert_action(&up, Mode::Up);
            let ad = expert_action(&down, Mode::Down);
            assert!((au[0] - ad[0]).abs() < 1e-9 && (au[1] + ad[1]).abs() < 1e-9);
            let du = up.advance(&spec, &au);
            let dd = down.advance(&spec, &ad);
            assert!((up.agent[0] - down.agent[0]).abs() < 1e-9 && (up.agent[1] + down.agent[1]).abs() < 1e-9);
            assert_eq!(du, dd);
            if du {
                break;
            }
        }
    }

    #[test]
    fn expert_always_succeeds() {
        for seed in 0..100 {
            for mode in [Mode::Up, Mode::Down] {
                assert!(run_expert(&TaskSpec::fork_reach(), seed, mode).success, "fork seed {seed}");
            }
            assert!(run_expert(&TaskSpec::moving_target(16), seed, Mode::Up).success, "moving seed {seed}");
        }
    }

    #[test]
    fn expert_turns_within_one_tick_of_jump() {
        let spec = TaskSpec::moving_target(16);
        let mut s = WorldState::reset(&spec, 11);
        let at = s.jump_tick().unwrap();
        let mut before = [0.0; 2];
        while s.tick < at {
            before = expert_action(&s, Mode::Up);
            s.advance(&spec, &before);
        }
        let after = expert_action(&s, Mode::Up);
        let cos = (before[0] * after[0] + before[1] * after[1])
            / ((before[0].hypot(before[1])) * after[0].hypot(after[1]));
        assert!(cos < (30f64).to_radians().cos());
    }

    #[test]
    fn dataset_is_deterministic_and_bounded() {
        let spec = TaskSpec::fork_reach();
        let a = generate_dataset(&spec, 20, 4).unwrap().to_bytes().unwrap();
        let b = generate_dataset(&spec, 20, 4).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        let d = generate_dataset(&spec, 20, 4).unwrap();
        for ep in &d.episodes {
            assert!(ep.actions.iter().all(|a| a.abs() <= V_MAX));
        }
    }

    #[test]
    fn tail_continues_the_approach() {
        let spec = TaskSpec::fork_reach();
        let (ep, mode) = generate_episodes(&spec, 1, 9).unwrap().remove(0);
        let reached = run_expert(&spec, episode_seed(9, 0), mode.unwrap());
        assert_eq!(ep.len(), reached.tick + TAIL_TICKS);
        let n = ep.len();
        let speed = |t: usize| ep.action(t)[0].hypot(ep.action(t)[1]);
        assert!(speed(n - 1) > 0.0 && speed(n - 1) < speed(n - TAIL_TICKS));
        let g = reached.goal;
        let d = |t: usize| (ep.state(t)[0] - g[0]).hypot(ep.state(t)[1] - g[1]);
        assert!(d(n - 1) < d(n - TAIL_TICKS) && d(n - TAIL_TICKS) <= spec.success_radius);
    }

    #[test]
    fn moving_target_tail_runs_past_the_cap() {
        let spec = TaskSpec::moving_target(16);
        let eps = generate_episodes(&spec, 20, 4).unwrap();
        assert!(eps.iter().any(|(e, _)| e.len() > TAIL_TICKS));
    }

    #[test]
    fn modes_are_balanced() {
        let eps = generate_episodes(&TaskSpec::fork_reach(), 1000, 0).unwrap();
        let up = eps.iter().filter(|(_, m)| *m == Some(Mode::Up)).count();
        assert!((450..=550).contains(&up), "{up}");
    }

    #[test]
    fn first_actions_form_two_clusters() {
        let eps = generate_episodes(&TaskSpec::fork_reach(), 400, 1).unwrap();
        let first: Vec<(f64, f64, Mode)> =
            eps.iter().map(|(e, m)| (e.action(0)[0], e.action(0)[1], m.unwrap())).collect();
        let centroid = |mode: Mode| {
            let pts: Vec<_> = first.iter().filter(|p| p.2 == mode).collect();
            let n = pts.len() as f64;
            let c = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
            let spread = pts.iter().map(|p| ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt()).sum::<f64>() / n;
            (c, spread)
        };
        let (cu, su) = centroid(Mode::Up);
        let (cd, sd) = centroid(Mode::Down);
        let between = ((cu.0 - cd.0).powi(2) + (cu.1 - cd.1).powi(2)).sqrt();
        assert!(between > 5.0 * su.max(sd), "{between} vs {su} {sd}");
    }

    #[test]
    fn expert_policy_keeps_prefix() {
        let spec = TaskSpec::fork_reach();
        let mut p = ExpertPolicy { spec: spec.clone(), horizon: 10, mode: Mode::Up };
        let env = crate::simworld::SimEnv::new(spec, 2);
        let prefix = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap();
        let c = p.infer(&crate::runtime::Environment::observe(&env), &prefix).unwrap();
        assert_eq!(&c.data()[..4], prefix.data());
        assert_eq!(c.shape(), [10, 2]);
    }
}
