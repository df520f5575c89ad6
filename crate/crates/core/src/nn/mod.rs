//! Transformer pieces shared by the conditioner and the action expert.

mod adaln;
mod attention;
mod layout;
mod linear;
mod rope;
mod timestep;

pub use adaln::{AdaLn, LN_EPS, Modulation, adaln_block, fixed_modulation};
pub use attention::{AttentionOutput, AttnBlockConfig, ContextKv, attention, attention_with_weights};
pub use layout::{Mask, MaskKind, MaskSpec, TokenLayout, TokenRole, build_mask};
pub use linear::{Linear, Mlp};
pub use rope::{ROPE_BASE, RopePlan, apply_rope, apply_rope_tensor, rope_angles, rope_indices};
pub use timestep::{TIME_SCALE, TimestepEmbedder, sinusoidal_features};
