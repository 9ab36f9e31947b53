//! Few-shot partial-label learning.
//!
//! An embedding network is meta-trained over many small tasks whose support
//! samples carry sets of candidate labels. Within each task, class prototypes
//! and per-sample label confidences are rectified jointly (confidence-weighted
//! means, candidate-restricted softmax over distances, and k-nearest-neighbor
//! smoothing), and the network is trained so that query samples sit close to
//! one rectified prototype. At test time the embedding is frozen, the new
//! task's prototypes are rectified the same way and queries go to the nearest
//! prototype.
//!
//! Modules, bottom up:
//!
//! - [`autodiff`]: reverse-mode differentiation over dense matrices.
//! - [`embedding`]: the feed-forward embedding network and checkpoints.
//! - [`pll`]: prototypes, confidence updates, rectification, posteriors, loss.
//! - [`episodes`]: synthetic worlds, feature files, episodes, corruption.
//! - [`trainer`]: meta-training and meta-testing.
//! - [`bench`]: paired benchmarks, ablations, sweeps and reports.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bench;
pub mod embedding;
pub mod episodes;
pub mod error;
pub mod pll;
pub mod trainer;

pub use autodiff::{grad_check, GradCheckReport, Graph, Matrix, Tensor};
pub use bench::{method_variant, run_benchmark, sweep, write_report, BenchResult, BenchSpec, Method};
pub use embedding::{init_network, NetworkParams, NetworkSpec};
pub use episodes::{corrupt, make_world, sample_episode, CorruptionSpec, Episode, World, WorldConfig};
pub use error::{Error, Result};
pub use pll::{
    classify_proba, compute_prototypes, rectify, CandidateMatrix, ConfidenceMatrix, DistanceKind, PrototypeSet, QueryObjective,
    RectifyConfig,
};
pub use trainer::{gradient_suite, lr_at, meta_test, meta_train, GradSuiteConfig, TrainConfig, TrainLog};
