//! Hierarchical semantic segmentation at desk scale.
//!
//! The crate provides the pieces needed to train, decode, and evaluate
//! tree-consistent multi-level segmentation models on synthetic imagery:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode gradients and SGD.
//! - [`hierarchy`]: tree-structured label systems and label rasters.
//! - [`bhccm`]: the bidirectional hierarchical consistency head and a toy
//!   encoder/decoder network to host it.
//! - [`losses`]: per-level and hierarchical consistency losses.
//! - [`decode`]: per-level argmax and joint path-score decoding.
//! - [`translu`]: dual-branch cross-domain transfer (knowledge sharing via
//!   gated cross-attention, semantic alignment via soft ROI masks).
//! - [`metrics`]: confusion matrices, mIoU, mAcc, consistency rate.
//! - [`datagen`]: deterministic synthetic scene generation.
//! - [`htf`]: the binary tensor interchange format.

pub mod check;
pub mod bhccm;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod checkpoint;
pub mod datagen;
pub mod decode;
pub mod hierarchy;
pub mod htf;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod translu;

pub use tensor::Tensor;
