use std::fmt::Write as _;
use std::io::Write;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TickEvent {
    Exec,
    Idle,
    /// An inference was started at this tick (an action is still executed).
    Trigger,
    /// A new chunk took over at this tick.
    Complete,
}

impl TickEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            TickEvent::Exec => "exec",
            TickEvent::Idle => "idle",
            TickEvent::Trigger => "trigger",
            TickEvent::Complete => "complete",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "exec" => TickEvent::Exec,
            "idle" => TickEvent::Idle,
            "trigger" => TickEvent::Trigger,
            "complete" => TickEvent::Complete,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TickRecord {
    pub tick: usize,
    pub action: Vec<f64>,
    pub chunk_id: Option<usize>,
    pub chunk_pos: Option<usize>,
    pub event: TickEvent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceRecord {
    pub chunk_id: usize,
    pub trigger_tick: usize,
    pub complete_tick: usize,
    /// Absolute tick of the chunk's position 0.
    pub start_tick: usize,
    pub prefix: Tensor,
    pub chunk: Tensor,
}

impl InferenceRecord {
    pub fn new(chunk_id: usize, trigger: usize, complete: usize, start: usize, prefix: Tensor, chunk: Tensor) -> Self {
        Self { chunk_id, trigger_tick: trigger, complete_tick: complete, start_tick: start, prefix, chunk }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrace {
    pub action_dim: usize,
    pub records: Vec<TickRecord>,
    pub inferences: Vec<InferenceRecord>,
    /// Ticks at which a new chunk started executing.
    pub boundaries: Vec<usize>,
    /// The environment reported the episode finished.
    pub done: bool,
    /// First tick without an available action, if any.
    pub fault: Option<usize>,
}

impl RolloutTrace {
    pub fn new(action_dim: usize) -> Self {
        Self { action_dim, records: Vec::new(), inferences: Vec::new(), boundaries: Vec::new(), done: false, fault: None }
    }

    pub(crate) fn push(&mut self, r: TickRecord) {
        debug_assert_eq!(r.tick, self.records.len());
        self.records.push(r);
    }

    pub fn ticks(&self) -> usize {
        self.records.len()
    }

    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some(tick) => Err(Error::Starvation { tick }),
            None => Ok(()),
        }
    }

    pub fn csv_header(action_dim: usize) -> String {
        let mut h = String::from("episode,seed,tick");
        for i in 0..action_dim {
            let _ = write!(h, ",a{i}");
        }
        h.push_str(",chunk_id,chunk_pos,event");
        h
    }

    pub fn write_csv<W: Write>(&self, w: &mut W, episode: usize, seed: u64) -> Result<()> {
        for r in &self.records {
            let mut line = format!("{episode},{seed},{}", r.tick);
            for a in &r.action {
                let _ = write!(line, ",{a:?}");
            }
            let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
            let _ = write!(line, ",{},{},{}", opt(r.chunk_id), opt(r.chunk_pos), r.event.as_str());
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Parses a file written by [`RolloutTrace::write_csv`] under
    /// [`RolloutTrace::csv_header`], one trace per `(episode, seed)` run.
    pub fn read_csv(text: &str) -> Result<Vec<(usize, u64, RolloutTrace)>> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty trace file".into() })?;
        let cols: Vec<&str> = header.split(',').collect();
        let action_dim = cols.iter().filter(|c| c.starts_with('a') && c[1..].parse::<usize>().is_ok()).count();
        if cols.len() != action_dim + 6 || header != Self::csv_header(action_dim) {
            return Err(Error::Parse { line: 1, msg: format!("unexpected trace header `{header}`") });
        }
        let mut out: Vec<(usize, u64, RolloutTrace)> = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(err("wrong field count"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad integer"));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            let episode = num(f[0])?;
            let seed = f[1].parse::<u64>().map_err(|_| err("bad seed"))?;
            let tick = num(f[2])?;
            let action = f[3..3 + action_dim]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| err("bad action value")))
                .collect::<Result<Vec<_>>>()?;
            let chunk_id = opt(f[3 + action_dim])?;
            let chunk_pos = opt(f[4 + action_dim])?;
            let event = TickEvent::parse(f[5 + action_dim]).ok_or_else(|| err("unknown event"))?;
            if out.last().is_none_or(|(e, s, _)| *e != episode || *s != seed) {
                out.push((episode, seed, RolloutTrace::new(action_dim)));
            }
            let tr = &mut out.last_mut().expect("pushed above").2;
            if tick != tr.records.len() {
                return Err(err("ticks must be contiguous from 0"));
            }
            if event != TickEvent::Idle {
                let prev = tr.records.iter().rev().find(|r| r.event != TickEvent::Idle);
                if prev.is_some_and(|p| p.chunk_id != chunk_id) {
                    tr.boundaries.push(tick);
                }
            }
            tr.records.push(TickRecord { tick, action, chunk_id, chunk_pos, event });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StitchStats {
    /// `‖first new − last old‖∞` at every chunk change among executed ticks.
    pub discontinuities: Vec<f64>,
    pub mean_discontinuity: f64,
    pub max_discontinuity: f64,
    /// `max ‖a_{t+1} − 2a_t + a_{t−1}‖∞` over all ticks (idle ticks command zero).
    pub max_jerk: f64,
}

fn inf_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn stitch_metrics(trace: &RolloutTrace) -> StitchStats {
    let executed: Vec<&TickRecord> = trace.records.iter().filter(|r| r.event != TickEvent::Idle).collect();
    let discontinuities: Vec<f64> = executed
        .windows(2)
        .filter(|w| w[0].chunk_id != w[1].chunk_id)
        .map(|w| inf_norm(&w[1].action, &w[0].action))
        .collect();
    let max_jerk = trace
        .records
        .windows(3)
        .map(|w| {
            w[0].action
                .iter()
                .zip(&w[1].action)
                .zip(&w[2].action)
                .map(|((a, b), c)| (c - 2.0 * b + a).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let n = discontinuities.len();
    StitchStats {
        mean_discontinuity: if n == 0 { 0.0 } else { discontinuities.iter().sum::<f64>() / n as f64 },
        max_discontinuity: discontinuities.iter().copied().fold(0.0, f64::max),
        discontinuities,
        max_jerk,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace_of(actions: &[(f64, usize)]) -> RolloutTrace {
        let mut t = RolloutTrace::new(1);
        for (i, &(a, c)) in actions.iter().enumerate() {
            t.push(TickRecord { tick: i, action: vec![a], chunk_id: Some(c), chunk_pos: Some(i), event: TickEvent::Exec });
        }
        t
    }

    #[test]
    fn constant_trace_is_smooth() {
        let s = stitch_metrics(&trace_of(&[(0.5, 0), (0.5, 0), (0.5, 1), (0.5, 1), (0.5, 2)]));
        assert_eq!(s.discontinuities, vec![0.0, 0.0]);
        assert_eq!(s.max_jerk, 0.0);
    }

    #[test]
    fn unit_step_at_boundary() {
        let s = stitch_metrics(&trace_of(&[(0.0, 0), (0.0, 0), (1.0, 1), (1.0, 1)]));
        assert_eq!(s.discontinuities, vec![1.0]);
        assert_eq!(s.mean_discontinuity, 1.0);
    }

    #[test]
    fn random_trace_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = RolloutTrace::new(2);
        let mut chunk = 0;
        for i in 0..200 {
            if rng.random_range(0..10) == 0 {
                chunk += 1;
            }
            let idle = rng.random_range(0..15) == 0;
            t.push(TickRecord {
                tick: i,
                action: if idle { vec![0.0, 0.0] } else { vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)] },
                chunk_id: (!idle).then_some(chunk),
                chunk_pos: (!idle).then_some(0),
                event: if idle { TickEvent::Idle } else { TickEvent::Exec },
            });
        }
        let s = stitch_metrics(&t);
        let mut disc = Vec::new();
        let mut last: Option<usize> = None;
        for i in 0..t.records.len() {
            if t.records[i].event == TickEvent::Idle {
                continue;
            }
            if let Some(j) = last {
                if t.records[j].chunk_id != t.records[i].chunk_id {
                    let mut m = 0.0f64;
                    for k in 0..2 {
                        m = m.max((t.records[i].action[k] - t.records[j].action[k]).abs());
                    }
                    disc.push(m);
                }
            }
            last = Some(i);
        }
        let mut jerk = 0.0f64;
        for i in 1..t.records.len() - 1 {
            for k in 0..2 {
                let v = t.records[i + 1].action[k] - 2.0 * t.records[i].action[k] + t.records[i - 1].action[k];
                jerk = jerk.max(v.abs());
            }
        }
        assert_eq!(s.discontinuities.len(), disc.len());
        for (a, b) in s.discontinuities.iter().zip(&disc) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((s.max_jerk - jerk).abs() <= 1e-12);
        let mean = disc.iter().sum::<f64>() / disc.len() as f64;
        assert!((s.mean_discontinuity - mean).abs() <= 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let mut t = trace_of(&[(0.25, 0), (-1.0 / 3.0, 1)]);
        t.records[1].event = TickEvent::Complete;
        t.records.push(TickRecord { tick: 2, action: vec![0.0], chunk_id: None, chunk_pos: None, event: TickEvent::Idle });
        let mut buf = Vec::new();
        writeln!(buf, "{}", RolloutTrace::csv_header(1)).unwrap();
        t.write_csv(&mut buf, 0, 7).unwrap();
        t.write_csv(&mut buf, 1, 8).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("episode,seed,tick,a0,chunk_id,chunk_pos,event\n0,7,0,0.25,0,0,exec\n"));
        let back = RolloutTrace::read_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].1, 8);
        assert_eq!(back[0].2.records, t.records);
        assert_eq!(back[0].2.boundaries, vec![1]);
    }
}
