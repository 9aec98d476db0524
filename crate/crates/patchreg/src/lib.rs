//! Patch-based unsupervised volumetric registration and atlas segmentation.
//!
//! The pipeline partitions a moving/fixed volume pair into patches, predicts
//! a deformation field per patch with a shared convolutional encoder-decoder,
//! refines and stitches the patch fields with windowed self-attention, and
//! trains the whole thing end to end against a windowed similarity loss, a
//! smoothness penalty, and a patchwise contrastive term — no labels needed.
//! Segmentation falls out by warping an atlas mask through the learned field.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod losses;
pub mod net;
pub mod patching;
pub mod phantom;
pub mod stitcher;
pub mod train;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
