//! Correlation-free optical flow with an occlusion-aware learnable warp and
//! kinetics-guided self-supervision.

pub mod dataio;
pub mod error;
pub mod kinetics;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod resample;
pub mod tensorfile;
pub mod trainer;
pub mod types;
pub mod viz;
pub mod warp;

pub use error::{Error, Result};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/conventions.md")]
    mod conventions {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/warpnet.md")]
    mod warpnet {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
