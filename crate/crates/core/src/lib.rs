//! Multi-scale Faster R-CNN face detection, from scratch in `f64`.
//!
//! The pipeline: a small VGG-style backbone exports three feature taps
//! (strides 4, 8 and 16); each tap is L2-normalized along channels, re-weighted
//! by a learnable per-channel `gamma`, concatenated and shrunk by a 1×1
//! convolution. The fused map feeds a region-proposal network and, through
//! per-tap ROI pooling, a two-layer detection head.

pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod detection;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod rpn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use boxes::BBox;
pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/boxes.md")]
    mod boxes {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/proposals.md")]
    mod proposals {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/gradcheck.md")]
    mod gradcheck {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
