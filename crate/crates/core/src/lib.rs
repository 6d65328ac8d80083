//! Contrastive pre-training for semi-supervised learning when the unlabeled
//! pool contains classes that never appear in the labeled set.
//!
//! The crate pairs a MoCo-style query/key encoder with a label-carrying
//! memory queue. Labeled anchors treat queue keys of their own class as extra
//! positives, weighted by a coefficient that decays linearly to zero over the
//! first `t_end` epochs. Everything needed to reproduce the experimental
//! protocol at desk scale lives here: mismatch-split construction, two-view
//! augmentation, the pre-training loop with checkpoints, weighted k-NN,
//! linear-probe and fine-tuning evaluation, and the sweep/report harness.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod queue;
pub mod rng;
pub mod training;
pub mod vector;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use vector::{ClassLabel, Embedding};
