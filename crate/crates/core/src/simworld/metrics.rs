use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::runtime::{RolloutTrace, TickEvent, stitch_metrics};

use super::env::{CONTROL_RATE_HZ, TaskSpec, WorldState};

/// What happened when a trace's actions were replayed in a fresh world.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOutcome {
    pub seed: u64,
    pub success: bool,
    pub ticks: usize,
    pub jump_tick: Option<usize>,
    /// Ticks from the goal jump until the commanded heading turned by > 30°.
    pub reaction_latency: Option<usize>,
}

const MOVING: f64 = 1e-3;

fn angle(a: &[f64], b: &[f64]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1];
    let n = a[0].hypot(a[1]) * b[0].hypot(b[1]);
    (dot / n).clamp(-1.0, 1.0).acos()
}

pub fn replay(spec: &TaskSpec, seed: u64, trace: &RolloutTrace) -> ReplayOutcome {
    let mut s = WorldState::reset(spec, seed);
    let jump = s.jump_tick();
    for r in &trace.records {
        let done = if r.event == TickEvent::Idle { s.hold(spec) } else { s.advance(spec, &r.action) };
        if done {
            break;
        }
    }
    let reaction_latency = jump.and_then(|j| {
        let before = trace.records[..j.min(trace.records.len())]
            .iter()
            .rev()
            .find(|r| r.event != TickEvent::Idle && r.action[0].hypot(r.action[1]) > MOVING);
        trace.records.iter().skip(j).find_map(|r| {
            let moving = r.event != TickEvent::Idle && r.action[0].hypot(r.action[1]) > MOVING;
            let turned = match before {
                Some(b) => angle(&b.action, &r.action) > 30f64.to_radians(),
                None => true,
            };
            (moving && turned).then(|| r.tick - j)
        })
    });
    ReplayOutcome { seed, success: s.success, ticks: trace.ticks(), jump_tick: jump, reaction_latency }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub total_ticks: usize,
    /// Successes per simulated minute of rollout.
    pub throughput_per_min: f64,
    pub mean_discontinuity: f64,
    pub max_discontinuity: f64,
    pub max_jerk: f64,
    /// Mean over episodes where a reaction was observed.
    pub reaction_latency: Option<f64>,
}

impl MetricsReport {
    pub fn from_outcomes(outcomes: &[ReplayOutcome], traces: &[&RolloutTrace]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Config("no traces to evaluate".into()));
        }
        let successes = outcomes.iter().filter(|o| o.success).count();
        let total_ticks: usize = outcomes.iter().map(|o| o.ticks).sum();
        let minutes = total_ticks as f64 / CONTROL_RATE_HZ / 60.0;
        let mut disc = Vec::new();
        let mut max_jerk = 0.0f64;
        for t in traces {
            let s = stitch_metrics(t);
            disc.extend(s.discontinuities);
            max_jerk = max_jerk.max(s.max_jerk);
        }
        let lat: Vec<f64> = outcomes.iter().filter_map(|o| o.reaction_latency.map(|l| l as f64)).collect();
        Ok(Self {
            episodes: outcomes.len(),
            successes,
            success_rate: successes as f64 / outcomes.len() as f64,
            total_ticks,
            throughput_per_min: if minutes > 0.0 { successes as f64 / minutes } else { 0.0 },
            mean_discontinuity: if disc.is_empty() { 0.0 } else { disc.iter().sum::<f64>() / disc.len() as f64 },
            max_discontinuity: disc.iter().copied().fold(0.0, f64::max),
            max_jerk,
            reaction_latency: (!lat.is_empty()).then(|| lat.iter().sum::<f64>() / lat.len() as f64),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n");
        let _ = writeln!(s, "  \"episodes\": {},", self.episodes);
        let _ = writeln!(s, "  \"successes\": {},", self.successes);
        let _ = writeln!(s, "  \"success_rate\": {},", self.success_rate);
        let _ = writeln!(s, "  \"total_ticks\": {},", self.total_ticks);
        let _ = writeln!(s, "  \"throughput_per_min\": {},", self.throughput_per_min);
        let _ = writeln!(s, "  \"mean_discontinuity\": {},", self.mean_discontinuity);
        let _ = writeln!(s, "  \"max_discontinuity\": {},", self.max_discontinuity);
        let _ = writeln!(s, "  \"max_jerk\": {},", self.max_jerk);
        match self.reaction_latency {
            Some(l) => {
                let _ = writeln!(s, "  \"reaction_latency\": {l}");
            }
            None => s.push_str("  \"reaction_latency\": null\n"),
        }
        s.push('}');
        s
    }
}

/// Replays every `(seed, trace)` pair and aggregates the results.
pub fn evaluate(traces: &[(u64, RolloutTrace)], spec: &TaskSpec) -> Result<MetricsReport> {
    let outcomes: Vec<ReplayOutcome> = traces.iter().map(|(seed, t)| replay(spec, *seed, t)).collect();
    let refs: Vec<&RolloutTrace> = traces.iter().map(|(_, t)| t).collect();
    MetricsReport::from_outcomes(&outcomes, &refs)
}
