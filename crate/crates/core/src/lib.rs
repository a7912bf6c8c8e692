//! # latentforge
//!
//! Low-N protein fitness prediction and design with TopK sparse autoencoders.
//!
//! The crate is organised as a pipeline:
//!
//! - [`data`]: DMS assay parsing, mutation notation, one-hot encoding and the
//!   `EMB1` binary embedding store.
//! - [`landscape`]: a deterministic planted sequence model that provides
//!   embeddings, logits and ground-truth fitness at desk scale.
//! - [`sae`]: the TopK sparse autoencoder (forward pass, losses, manual
//!   gradients, Adam training loop with the dead-latent auxiliary loss).
//! - [`probe`]: mean-pooled ridge probes with validation-driven lambda
//!   selection and Spearman evaluation.
//! - [`splits`]: the five fitness-extrapolation partitions and the nine-trial
//!   protocol.
//! - [`steering`]: latent feature steering designer.
//! - [`baselines`]: simulated annealing and random mutagenesis designers.
//! - [`oracle`]: MLP fitness evaluator and design-pool statistics.
//! - [`analysis`]: probe weight sparsity and activation-difference attribution.
//! - [`pipeline`]: config-driven orchestration used by the `latentforge` CLI.

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod landscape;
mod linalg;
pub mod oracle;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod sae;
pub mod splits;
pub mod steering;

pub use error::{Error, Result};

pub use data::{DmsDataset, DmsRecord, EmbeddingStore, Mutation, StoreEntry};
pub use landscape::{SequenceModel, SyntheticConfig, SyntheticModel};
pub use probe::{FeatureKind, ProbeModel};
pub use sae::{SaeConfig, SaeParams, SaeTrainState};

pub use steering::{DesignCandidate, DesignTarget, SteeringConfig};
