//! Moment quantization for video temporal grounding.
//!
//! A learnable codebook clusters temporally modeled clip features through
//! codebook and commitment losses while the continuous features keep driving
//! the grounding heads ("soft" quantization). The crate also carries the
//! baseline placements (image, clip, none) and fusion variants (hard, add,
//! concat), the training objectives, the moment-retrieval / highlight
//! metrics, a synthetic benchmark, and codebook diagnostics.
//!
//! Modules, bottom-up:
//!
//! - [`autodiff`]: reverse-mode tape over `f64` tensors with stop-gradient.
//! - [`codebook`]: projection, lookup, losses, k-means priors, utilization.
//! - [`model`]: encoder, quantization placement/fusion, heads, span decoding.
//! - [`objectives`]: focal + L1, intra-video contrast, InfoNCE, weighting.
//! - [`data`]: synthetic generator, JSONL annotations, MQFT feature files.
//! - [`metrics`]: R1@IoU, mAP, mIoU, HD mAP, HIT@1.
//! - [`trainer`]: Adam training loop, evaluation, MQCK checkpoints, snapshots.
//! - [`analysis`]: PCA maps, separation statistics, codebook evolution.
//! - [`cli`]: the `mqvtg` command-line surface.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod codebook;
pub mod data;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use autodiff::{Tape, Tensor, Var};
pub use codebook::{Assignment, Codebook};
