//! Nucleus-aware unpaired pretraining toolkit.
//!
//! The crate implements both halves of an unpaired mask-to-histology
//! translation setup and everything needed to run it end to end on a
//! workstation: synthesized nuclear mask images, a co-modulated
//! mask-to-histology generator, a pyramid-based histology-to-mask network
//! with an instance branch, adversarial training with adaptive
//! discriminator augmentation, weight export for downstream fine-tuning,
//! and instance segmentation metrics.

pub mod ada;
pub mod checkpoint;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod probe;
pub mod synth;
pub mod tensor;
pub mod train;
