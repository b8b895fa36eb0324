//! CTC sequence recognition with intermediate losses and momentum
//! pseudo-labeling, at a scale that trains on a laptop CPU.
//!
//! The crate is organized bottom-up:
//!
//! - [`nn`]: reverse-mode numerics, Adam, learning-rate schedules and the
//!   binary parameter container.
//! - [`ctc`]: the collapsing map, forward-backward loss, greedy decoding and a
//!   brute-force reference.
//! - [`vocab`]: nested pair-merge subword vocabularies.
//! - [`model`]: the residual encoder with CTC heads (plain, intermediate,
//!   self-conditioned and hierarchical-conditional).
//! - [`data`]: the synthetic corpus, masking augmentation and dataset files.
//! - [`metrics`]: edit distance, WER and WER recovery rate.
//! - [`mpl`]: seed training and the momentum pseudo-labeling loops.
//! - [`experiment`]: configuration and the end-to-end pipelines the CLI runs.

pub mod cli;
pub mod ctc;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod mpl;
pub mod nn;
pub mod rng;
pub mod vocab;
