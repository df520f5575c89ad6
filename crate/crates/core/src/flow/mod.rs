//! Diffusion-transformer action expert trained with flow matching.

mod config;
mod dit;
mod loss;
mod noise;
mod sampler;

pub use config::{FlowConfig, KvSource, PrefixSpec, ReweightConfig};
pub use dit::{FlowExpert, PREFIX};
pub use loss::{flow_loss, flow_loss_value, reweight, reweight_weights};
pub use noise::{NoisySample, make_noisy, sample_tau};
pub use sampler::{VelocityField, euler_integrate, sample_chunk, sample_chunk_from};
