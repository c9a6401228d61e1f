//! Probe-positioning guidance for ultrasound sweeps.
//!
//! A phantom simulator stands in for patient data; a small autodiff engine
//! trains single-frame and sequence classifiers that say where the imaging
//! plane sits relative to the prostate and which way to rotate; the guidance
//! engine runs the sequence model on a live frame stream.
//!
//! The guide in `book/` walks through each part with runnable examples.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod guidance;
pub mod labels;
pub mod models;
pub mod phantom;
pub mod stats;
pub mod tensor;
pub mod train;

// the book's snippets run as doc-tests
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/phantom.md")]
    mod phantom {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/tensor.md")]
    mod tensor {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/guidance.md")]
    mod guidance {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
