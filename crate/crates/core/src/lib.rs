//! Blind image restoration with a self-attention adapter on a miniature
//! latent diffusion model.

pub mod analyze;
pub mod attention;
pub mod checkpoint;
pub mod codec;
pub mod degrade;
pub mod denoiser;
pub mod error;
pub mod graph;
pub mod image;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod tiling;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{LatentTensor, Real, Tensor};

/// Guide chapters compiled as doc-tests so their snippets stay in sync.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    mod schedule {}
    #[doc = include_str!("../../../book/src/codec.md")]
    mod codec {}
    #[doc = include_str!("../../../book/src/degradations.md")]
    mod degradations {}
    #[doc = include_str!("../../../book/src/adapter.md")]
    mod adapter {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
}
