//! Scribble-supervised 2-D segmentation.
//!
//! Training combines triplet augmentation with self-recovery ([`tas`]) and
//! boundary-aware pseudo-label supervision ([`bap`]) on a shared-weight
//! encoder-decoder ([`model`]). [`data`] reads NIfTI volumes and generates a
//! synthetic scribble dataset, [`train`] runs the optimization loop and
//! [`eval`] scores, tabulates and renders results.

pub mod bap;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod selftest;
pub mod tas;
pub mod train;
pub mod types;

pub use ndarray;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use model::{Checkpoint, NetworkSpec, UNet};
pub use types::{
    one_hot, BoundaryMap, CutoutBox, FusionWeights, HardLabelMap, Image, JigsawSpec, ProbMap, Real,
    ScribbleMask,
};
