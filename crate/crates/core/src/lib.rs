//! Build new classifiers by stitching together fragments of trained networks.
//!
//! Fragments are scored for compatibility with linear centered kernel
//! alignment ([`cka`]), joined through a least-squares projection folded into
//! the next layer's weights ([`stitch`]), and composed by a threshold-pruned
//! recursive search ([`generate`]). [`zoo`] trains the small source networks
//! and [`eval`] scores and ensembles the results.

pub mod cka;
pub mod error;
pub mod eval;
pub mod generate;
pub mod nn;
pub mod stitch;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use nn::{Fragment, FragmentKind, FragmentPool, Layer, LayerKind, Model, Network};
pub use stitch::StitchNet;
pub use tensor::Tensor;
