//! Subject-independent human activity recognition.
//!
//! An encoder-decoder feature extractor is trained jointly with an activity
//! classifier and, adversarially, against a subject discriminator, while a
//! multi-kernel MMD term pulls the per-subject embedding distributions
//! together. The crate covers the whole pipeline:
//!
//! * [`datapipe`]: raw recording repair, normalization, windowing, loaders
//!   and the binary dataset container.
//! * [`kernels`]: Gaussian kernel matrices and (multi-domain) MMD.
//! * [`nets`]: the four networks and their layers, with hand-written backprop.
//! * [`losses`]: the loss terms and the combined minimax objective.
//! * [`trainer`]: the three-stage training procedure and its ablation variants.
//! * [`eval`]: leave-one-subject-out evaluation, metrics and reports.
//! * [`cli`]: the `harnest` command-line surface.

pub mod cli;
pub mod datapipe;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod losses;
pub mod nets;
pub mod trainer;

pub use error::{Error, Result};
