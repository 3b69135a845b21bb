//! Intervertebral disc candidate refinement.
//!
//! The crate contains a shape-attention recalibration block for pyramid
//! features, a permutation-invariant "look once" network that classifies
//! every disc candidate of a noisy detection in a single forward pass, the
//! exhaustive search-tree and condition-based selectors it is compared
//! against, and a seeded synthetic benchmark with the usual labeling
//! metrics (distance to target, FNR/FPR under a 5 mm rule, F1, AUC).
//!
//! Modules:
//!
//! - [`numkit`]: tensors, a reverse-mode tape, Adam, gradient checks, checkpoints
//! - [`heatmap`]: Gaussian target rendering, peak extraction, MSE loss
//! - [`shape_attention`]: image-gradient shape feature, channel/shape gates, pyramid aggregation
//! - [`lookonce`]: the refinement network, its trainer and `refine`
//! - [`baselines`]: subset counting, search-tree oracle, condition filter
//! - [`synthbench`]: case generator, metrics, inference-cost benchmark
//! - [`cli`]: the `ivd-lookonce` command line
//!
//! Runnable walkthroughs live in `examples/`.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod heatmap;
pub mod lookonce;
pub mod numkit;
pub mod shape_attention;
pub mod synthbench;

pub use error::{Error, Result};
