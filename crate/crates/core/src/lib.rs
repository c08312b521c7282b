//! Classify-and-rank sentence-pair similarity.
//!
//! Sentence pairs are encoded into a `[CLS]`-style pair vector and two
//! sentence vectors. A routing network sends each sentence vector to an
//! upper-range or lower-range projector, and a scorer reads the two projected
//! vectors. The crate also carries the evaluation metrics and embedding-space
//! diagnostics used to compare such heads, and a small reverse-mode autodiff
//! kernel that trains them.

pub mod analysis;
pub mod data;
pub mod diffkit;
pub mod encoder;
mod error;
pub mod metrics;
pub mod mixsp;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    pub struct Intro;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub struct Autodiff;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/head.md")]
    pub struct Head;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/analysis.md")]
    pub struct Analysis;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
    #[doc = include_str!("../../../book/src/limits.md")]
    pub struct Limits;
}
