use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// The chunk currently being executed. Position `p` belongs to absolute tick
/// `start_tick + p`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveChunk {
    pub id: usize,
    pub actions: Tensor,
    pub start_tick: usize,
}

impl ActiveChunk {
    pub fn position(&self, tick: usize) -> Option<usize> {
        let p = tick.checked_sub(self.start_tick)?;
        (p < self.actions.rows()).then_some(p)
    }
}

/// A computed chunk waiting for its inference latency to elapse.
#[derive(Clone, Debug, PartialEq)]
pub struct PendingChunk {
    pub chunk: ActiveChunk,
    pub ready_tick: usize,
}

/// Active chunk plus at most one pending successor.
#[derive(Clone, Debug)]
pub struct ChunkBuffer {
    active: ActiveChunk,
    pending: Option<PendingChunk>,
}

impl ChunkBuffer {
    pub fn new(first: ActiveChunk) -> Self {
        Self { active: first, pending: None }
    }

    pub fn active(&self) -> &ActiveChunk {
        &self.active
    }

    pub fn pending(&self) -> Option<&PendingChunk> {
        self.pending.as_ref()
    }

    pub fn submit(&mut self, job: PendingChunk) -> Result<()> {
        if self.pending.is_some() {
            return Err(Error::Layout("an inference job is already pending".into()));
        }
        self.pending = Some(job);
        Ok(())
    }

    /// Swaps in the pending chunk if it is ready at `tick`. Returns whether a
    /// swap happened.
    pub fn promote(&mut self, tick: usize) -> bool {
        match self.pending.take() {
            Some(p) if p.ready_tick <= tick => {
                self.active = p.chunk;
                true
            }
            other => {
                self.pending = other;
                false
            }
        }
    }

    /// Action for `tick` with its chunk position.
    pub fn action_at(&self, tick: usize) -> Result<(&[f64], usize)> {
        let p = self.active.position(tick).ok_or(Error::Starvation { tick })?;
        Ok((self.active.actions.row_slice(p), p))
    }
}
