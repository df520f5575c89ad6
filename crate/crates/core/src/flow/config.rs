use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nn::AttnBlockConfig;

/// Where each layer's self-attention keys and values are projected from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KvSource {
    /// The layer-0 token embeddings, modulated by the layer's adaLN. A token
    /// then only ever reads the tokens its own mask row admits, at any depth.
    Embeddings,
    /// The running hidden state, as in a plain transformer. Information can
    /// hop across tokens from layer to layer.
    Hidden,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub horizon: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub layer_count: usize,
    pub model_dim: usize,
    pub head_count: usize,
    pub mlp_hidden: usize,
    pub window: usize,
    pub rope_offset: usize,
    pub tau_max: f64,
    pub tau_alpha: f64,
    pub tau_beta: f64,
    pub sample_steps: usize,
    pub kv_source: KvSource,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
            action_dim: 2,
            state_dim: 2,
            layer_count: 4,
            model_dim: 64,
            head_count: 4,
            mlp_hidden: 128,
            window: 6,
            rope_offset: 10,
            tau_max: 0.999,
            tau_alpha: 1.5,
            tau_beta: 1.0,
            sample_steps: 5,
            kv_source: KvSource::Embeddings,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        AttnBlockConfig::new(self.model_dim, self.head_count, true)?;
        if self.window < 1 {
            return Err(Error::Config("flow window must be >= 1".into()));
        }
        if !(self.tau_max > 0.0 && self.tau_max < 1.0) {
            return Err(Error::Range { what: "tau_max", value: self.tau_max, lo: 0.0, hi: 1.0 });
        }
        if self.tau_alpha <= 0.0 || self.tau_beta <= 0.0 {
            return Err(Error::Config("Beta parameters must be positive".into()));
        }
        if self.sample_steps < 1 {
            return Err(Error::Config("sample_steps must be >= 1".into()));
        }
        if self.horizon == 0 || self.action_dim == 0 || self.layer_count == 0 {
            return Err(Error::Config("flow dimensions must be positive".into()));
        }
        if (self.model_dim / self.head_count) % 2 != 0 {
            return Err(Error::Config("head dim must be even for rotary encoding".into()));
        }
        Ok(())
    }
}

/// Committed actions the new chunk must start with, `prefix_len × A`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixSpec {
    pub actions: Tensor,
}

impl PrefixSpec {
    pub fn none(action_dim: usize) -> Self {
        Self { actions: Tensor::zeros(&[0, action_dim]) }
    }

    pub fn new(actions: Tensor) -> Result<Self> {
        actions.dims2()?;
        Ok(Self { actions })
    }

    /// First `len` rows of `chunk`.
    pub fn from_chunk(chunk: &Tensor, len: usize) -> Result<Self> {
        let (r, c) = chunk.dims2()?;
        if len > r {
            return Err(Error::Config(format!("prefix of {len} rows from a {r}-row chunk")));
        }
        Self::new(Tensor::new(&[len, c], chunk.data()[..len * c].to_vec())?)
    }

    pub fn len(&self) -> usize {
        self.actions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss re-weighting by online prefix error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReweightConfig {
    pub lambda: f64,
    pub max_weight: f64,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self { lambda: 1.0, max_weight: 5.0 }
    }
}
