//! Desk-scale few-shot segmentation with attention-distilled class queries.
//!
//! The crate bundles everything needed to study support/query asymmetry in
//! few-shot segmentation without pretrained weights or external data:
//!
//! - [`tensor`] — a dense f64 tensor engine with reverse-mode autodiff,
//!   finite-difference verification, AdamW, and a binary checkpoint format;
//! - [`dataset`] — a deterministic synthetic scene generator whose query
//!   images carry hardness tags (camouflage, small, elongated, missing,
//!   blur) while support images stay clean, plus the episodic sampler;
//! - [`encoder`], [`correlation`], [`aad`], [`decoder`] — the model:
//!   a shared multi-scale CNN, per-scale cross-attention mask transfer,
//!   the query-distillation cascade, and the fusion/decoding head;
//! - [`trainer`] and [`evaluator`] — episodic meta-training and the
//!   task-protocol evaluation harness (mIoU, K-shot vote/average);
//! - [`cli`] — the `aadseg` binary: `gen-data`, `train`, `eval`, `ablate`,
//!   `grad-check`.
//!
//! See the crate examples for one runnable entry point per capability.

pub mod aad;
pub mod cli;
pub mod correlation;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod trainer;
mod util;

pub use error::{Error, Result};
