//! `XRDS` demonstration files.
//!
//! ```text
//! "XRDS" | version u16 | obs_dim u16 | state_dim u16 | action_dim u16
//!        | rate_hz u16 | episode_count u32
//! per episode: length u32 | instruction_id u16
//!              | observations f32[length·obs_dim]
//!              | states f32[length·state_dim]
//!              | actions f32[length·action_dim]
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use crate::error::{Error, Result};

use super::io::{Reader, narrow, put_f32s};

const MAGIC: &[u8; 4] = b"XRDS";
const VERSION: u16 = 1;

/// One demonstration; row `t` of each matrix belongs to tick `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub instruction_id: usize,
    pub observations: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    len: usize,
}

impl Episode {
    pub fn new(instruction_id: usize) -> Self {
        Self { instruction_id, observations: Vec::new(), states: Vec::new(), actions: Vec::new(), len: 0 }
    }

    pub fn push(&mut self, obs: &[f64], state: &[f64], action: &[f64]) {
        self.observations.extend_from_slice(obs);
        self.states.extend_from_slice(state);
        self.actions.extend_from_slice(action);
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn row(v: &[f64], len: usize, t: usize) -> &[f64] {
        let w = v.len() / len;
        &v[t * w..(t + 1) * w]
    }

    pub fn observation(&self, t: usize) -> &[f64] {
        Self::row(&self.observations, self.len, t)
    }

    pub fn state(&self, t: usize) -> &[f64] {
        Self::row(&self.states, self.len, t)
    }

    pub fn action(&self, t: usize) -> &[f64] {
        Self::row(&self.actions, self.len, t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub obs_dim: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub rate_hz: u16,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.obs_dim, self.state_dim, self.action_dim] {
            out.extend_from_slice(&(narrow(d as u64, u16::MAX as u64, "dimension")? as u16).to_le_bytes());
        }
        out.extend_from_slice(&self.rate_hz.to_le_bytes());
        let n = narrow(self.episodes.len() as u64, u32::MAX as u64, "episode count")? as u32;
        out.extend_from_slice(&n.to_le_bytes());
        for ep in &self.episodes {
            let len = ep.len();
            if ep.observations.len() != len * self.obs_dim
                || ep.states.len() != len * self.state_dim
                || ep.actions.len() != len * self.action_dim
            {
                return Err(Error::Config("episode rows do not match the dataset dimensions".into()));
            }
            out.extend_from_slice(&(narrow(len as u64, u32::MAX as u64, "episode length")? as u32).to_le_bytes());
            let id = narrow(ep.instruction_id as u64, u16::MAX as u64, "instruction id")? as u16;
            out.extend_from_slice(&id.to_le_bytes());
            put_f32s(&mut out, &ep.observations);
            put_f32s(&mut out, &ep.states);
            put_f32s(&mut out, &ep.actions);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected XRDS".into() });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let obs_dim = r.u16("obs_dim")? as usize;
        let state_dim = r.u16("state_dim")? as usize;
        let action_dim = r.u16("action_dim")? as usize;
        let rate_hz = r.u16("rate_hz")?;
        let count = r.u32("episode_count")? as usize;
        let mut episodes = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32("episode length")? as usize;
            let instruction_id = r.u16("instruction id")? as usize;
            let observations = r.f32s(len * obs_dim, "observations")?;
            let states = r.f32s(len * state_dim, "states")?;
            let actions = r.f32s(len * action_dim, "actions")?;
            episodes.push(Episode { instruction_id, observations, states, actions, len });
        }
        if r.remaining() != 0 {
            return r.fail(format!("{} trailing bytes", r.remaining()));
        }
        Ok(Self { obs_dim, state_dim, action_dim, rate_hz, episodes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
