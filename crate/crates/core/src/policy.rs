//! Conditioner plus action expert, and the adapters that run them as chunk
//! policies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioner::{Conditioner, ConditionerConfig, ContextInput};
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowExpert, PrefixSpec, sample_chunk};
use crate::nn::MaskSpec;
use crate::runtime::{ChunkPolicy, Observation};

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub conditioner: ConditionerConfig,
    pub flow: FlowConfig,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, f) = (&self.conditioner, &self.flow);
        c.validate()?;
        f.validate()?;
        if c.model_dim != f.model_dim || c.layer_count != f.layer_count {
            return Err(Error::Config(format!(
                "conditioner ({} wide, {} layers) and expert ({} wide, {} layers) must agree",
                c.model_dim, c.layer_count, f.model_dim, f.layer_count
            )));
        }
        if c.horizon != f.horizon || c.action_dim != f.action_dim || c.state_dim != f.state_dim {
            return Err(Error::Config("conditioner and expert disagree on horizon or action/state width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub store: ParamStore,
    pub conditioner: Conditioner,
    pub expert: FlowExpert,
}

impl Policy {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conditioner = Conditioner::new(&mut store, cfg.conditioner.clone(), &mut rng)?;
        let expert = FlowExpert::new(&mut store, cfg.flow.clone(), &mut rng)?;
        Ok(Self { cfg, store, conditioner, expert })
    }

    /// Builds the architecture and overwrites every parameter from `entries`.
    pub fn from_checkpoint(cfg: PolicyConfig, entries: &[(String, Tensor)]) -> Result<Self> {
        let mut p = Self::new(cfg, 0)?;
        p.store.load(entries)?;
        Ok(p)
    }

    pub fn checkpoint(&self) -> Vec<(String, Tensor)> {
        self.store.to_named()
    }

    pub fn context(obs: &Observation) -> ContextInput {
        ContextInput { observation: obs.features.clone(), instruction_id: obs.instruction_id, timestamp_tick: obs.tick }
    }

    /// One chunk from the action expert, prefix rows included.
    pub fn sample(&self, obs: &Observation, prefix: &PrefixSpec, mask: &MaskSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let kv = self.conditioner.encode_context(&self.store, &Self::context(obs))?;
        sample_chunk(&self.expert, &self.store, &kv, &obs.state, prefix, mask, rng)
    }

    /// Best-scored candidate of the choice head.
    pub fn choose(&self, obs: &Observation) -> Result<Tensor> {
        let out = self.conditioner.choice_forward(&self.store, &Self::context(obs), &obs.state)?;
        Ok(out.candidates[out.best()].clone())
    }
}

/// Runs the action expert. With `use_prefix` off the committed actions are
/// ignored and every chunk is sampled from scratch.
pub struct FlowPolicy<'a> {
    pub policy: &'a Policy,
    pub mask: MaskSpec,
    pub use_prefix: bool,
    rng: ChaCha8Rng,
}

impl<'a> FlowPolicy<'a> {
    pub fn new(policy: &'a Policy, mask: MaskSpec, use_prefix: bool, seed: u64) -> Self {
        Self { policy, mask, use_prefix, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl ChunkPolicy for FlowPolicy<'_> {
    fn infer(&mut self, obs: &Observation, prefix: &Tensor) -> Result<Tensor> {
        let a = self.policy.cfg.flow.action_dim;
        let prefix = if self.use_prefix && prefix.rows() > 0 {
            PrefixSpec::new(prefix.clone())?
        } else {
            PrefixSpec::none(a)
        };
        self.policy.sample(obs, &prefix, &self.mask, &mut self.rng)
    }
}

/// Runs the choice head of the conditioner; committed actions are ignored.
pub struct ChoicePolicy<'a> {
    pub policy: &'a Policy,
}

impl ChunkPolicy for ChoicePolicy<'_> {
    fn infer(&mut self, obs: &Observation, _prefix: &Tensor) -> Result<Tensor> {
        self.policy.choose(obs)
    }
}
