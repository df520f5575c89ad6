//! File formats and run configuration.

mod checkpoint;
mod config;
mod dataset;
mod io;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{DataSettings, Head, ModelSettings, RolloutMask, RolloutSettings, RunConfig, parse_config};
pub use dataset::{Dataset, Episode};
