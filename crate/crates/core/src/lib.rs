pub mod conditioner;
pub mod diffcore;
pub mod error;
pub mod flow;
pub mod nn;
pub mod policy;
pub mod runtime;
pub mod simworld;
pub mod storage;
pub mod training;

pub use error::{Error, Result};

// The guide in book/ is compiled here so its snippets run under `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/runtime.md")]
    mod runtime {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
