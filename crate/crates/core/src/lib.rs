//! Masked contrastive representation learning for small vision transformers.
//!
//! A ViT encoder is pre-trained on two jointly optimized signals: L1
//! reconstruction of patch pixels from a randomly masked view, and an InfoNCE
//! contrast between online projections and momentum-encoder keys with a
//! memory bank of negatives. The encoder is then evaluated by fine-tuning or
//! by a linear probe.
//!
//! Everything runs on a small tape-based differentiator ([`tensor`]) so each
//! component can be gradient-checked at 64-bit.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod momentum;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod rollout;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/vit.md")]
    mod vit {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/momentum.md")]
    mod momentum {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
