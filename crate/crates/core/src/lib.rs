//! One-shot image animation with multi-scale motion and appearance codebook
//! compensation.
//!
//! The pipeline: a keypoint-based estimator predicts a coarse flow `M^0`;
//! for each scale `i = 1..N` motion codebook compensation refines it to
//! `M^i`, the source features of that scale are warped by `M^i`, and
//! appearance codebook compensation repairs the warped features. The image
//! decoder fuses the compensated pyramid into the output frame.

pub mod acc;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod error;
pub mod flowcore;
pub mod im2col;
pub mod imagegen;
pub mod mcc;
pub mod nn;
pub mod norm;
pub mod retrieval;
pub mod toolkit;
pub mod training;

pub use config::Config;
pub use error::{Error, Result};
