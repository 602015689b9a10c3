//! Adversarially trained Bayesian neural networks at desk scale.
//!
//! The library trains an ensemble of parameter particles with Stein
//! variational gradient descent on adversarial examples, under a penalty
//! that forces the information gained from clean and perturbed inputs to
//! match. Around that sit an attack suite (FGSM, PGD, ensemble-aware
//! EoT-PGD, a black-box square search) and diagnostics that measure the
//! empirical risk gap and its provable upper bound.
//!
//! Modules follow the pipeline:
//!
//! - [`tensor`]: recorded computation graphs with exact reverse-mode
//!   gradients with respect to parameters and inputs;
//! - [`network`]: MLP classifiers over flat parameter vectors, stable
//!   softmax and cross-entropy, parameter snapshots;
//! - [`svgd`]: the particle ensemble, RBF kernel with median-heuristic
//!   bandwidth, repulsive update directions, stepping;
//! - [`attacks`]: norm-ball projection and the attack suite;
//! - [`infogain`]: entropy, information gain (mutual information between
//!   label and parameters) and the constrained training objective;
//! - [`training`]: the per-batch loop, modes, checkpointing;
//! - [`evaluation`]: risks, gap, bound, transfer matrices, robustness
//!   curves;
//! - [`data`]: synthetic datasets, splits, batching and file formats;
//! - [`config`] / [`commands`]: the experiment file and CLI surface;
//! - [`gradcheck`]: the finite-difference suite gating everything else.
//!
//! The `book/` directory of the repository walks through the concepts;
//! its code snippets compile and run as part of `cargo test` (see the
//! `book_doctests` module).

pub mod attacks;
pub mod commands;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod gradcheck;
pub mod infogain;
pub mod network;
pub mod seeds;
pub mod svgd;
pub mod tensor;
pub mod training;

pub use attacks::{AdversarialBatch, AttackConfig, AttackKind, Bounds, Norm};
pub use config::ExperimentConfig;
pub use data::LabeledDataset;
pub use evaluation::{BoundValues, MetricsRecord, RecordTag, TransferMatrix};
pub use infogain::IgConfig;
pub use network::{Activation, FlatParams, NetworkShape, PredictiveDistribution};
pub use svgd::{ParticleEnsemble, StepMode, SvgdConfig};
pub use tensor::{Gradients, NodeId, Tape, Tensor};
pub use training::{TrainConfig, TrainMode, TrainReport};

/// Book chapters double as doc-tests: every fenced Rust block in
/// `book/src/*.md` compiles and runs under `cargo test --doc`, keeping the
/// guide in sync with the library.
#[cfg(doctest)]
mod book_doctests {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/svgd.md")]
    mod svgd {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    mod attacks {}
    #[doc = include_str!("../../../book/src/information-gain.md")]
    mod information_gain {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
