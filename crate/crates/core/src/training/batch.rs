use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::conditioner::ContextInput;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::storage::Dataset;

/// One training example: the context at tick `t` and the next `T` actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub context: ContextInput,
    pub state: Vec<f64>,
    pub chunk: Tensor,
}

/// `T × A` actions from tick `t`; rows past the end of the episode are zero
/// (the agent holds still once the episode is over).
pub fn chunk_at(data: &Dataset, episode: usize, t: usize, horizon: usize) -> Tensor {
    let ep = &data.episodes[episode];
    let a = data.action_dim;
    let mut out = vec![0.0; horizon * a];
    for k in 0..horizon.min(ep.len().saturating_sub(t)) {
        out[k * a..(k + 1) * a].copy_from_slice(ep.action(t + k));
    }
    Tensor::new(&[horizon, a], out).expect("sized above")
}

pub fn sample_at(data: &Dataset, episode: usize, t: usize, horizon: usize) -> Sample {
    let ep = &data.episodes[episode];
    Sample {
        context: ContextInput {
            observation: ep.observation(t).to_vec(),
            instruction_id: ep.instruction_id,
            timestamp_tick: t,
        },
        state: ep.state(t).to_vec(),
        chunk: chunk_at(data, episode, t, horizon),
    }
}

/// Draws ticks uniformly over every recorded step of every episode.
pub struct Sampler<'a> {
    data: &'a Dataset,
    horizon: usize,
    /// Cumulative step counts; `starts[i]` is the first flat index of episode `i`.
    starts: Vec<usize>,
    total: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a Dataset, horizon: usize) -> Result<Self> {
        let mut starts = Vec::with_capacity(data.episodes.len());
        let mut total = 0;
        for ep in &data.episodes {
            starts.push(total);
            total += ep.len();
        }
        if total == 0 {
            return Err(Error::Config("dataset has no steps".into()));
        }
        Ok(Self { data, horizon, starts, total })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Sample {
        let flat = rng.random_range(0..self.total);
        let ep = self.starts.partition_point(|&s| s <= flat) - 1;
        sample_at(self.data, ep, flat - self.starts[ep], self.horizon)
    }

    pub fn batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}
