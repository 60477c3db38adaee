//! Multi-modal image-text manipulation detection.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: fp64 tensors, a tape-based autodiff engine, checkpoints.
//! - [`nn`]: linear layers, layer norm, multi-head attention, transformer blocks.
//! - [`data`]: synthetic image-text manipulation dataset and its file format.
//! - [`encoders`]: global image, text, and local face encoders.
//! - [`fca`]: contrastive alignment with manipulated counterparts as hard negatives.
//! - [`mlgf`]: query-transformer fusion of local and global streams.
//! - [`heads`]: binary, multi-label and token grounding heads plus the total loss.
//! - [`model`]: the assembled detector.
//! - [`metrics`]: AUC, EER, accuracy, mAP, CF1/OF1, grounding P/R/F1.
//! - [`trainer`]: AdamW, warmup/cosine schedule, training and evaluation.
//! - [`bridge`]: projection of fused features into a language-model prompt.

pub mod bridge;
pub mod data;
pub mod encoders;
pub mod fca;
pub mod heads;
pub mod metrics;
pub mod mlgf;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;
