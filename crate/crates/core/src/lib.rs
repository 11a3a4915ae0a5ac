pub mod assembly;
pub mod backbone;
pub mod bbox;
pub mod blocks;
pub mod data;
pub mod detect;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rtdetr;
pub mod yolo;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

/// Chapters of the book under `book/src`, compiled so their snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/layer-registry.md")]
    mod layer_registry {}
    #[doc = include_str!("../../../book/src/detectors.md")]
    mod detectors {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/set-matching.md")]
    mod set_matching {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
