//! Cross-modal retrieval engine: frozen transformer backbones consolidated
//! with trainable adapter layers, embedding-level augmentation inputs
//! (image segments, visual descriptions), multi-level circle-loss training,
//! and a retrieval evaluation harness with late-fusion protocols.
//!
//! The crate is self-contained: a reverse-mode autodiff tape ([`autodiff`]),
//! neural building blocks and Adam ([`layers`]), the four embedding branches
//! ([`encoders`]), training objectives ([`losses`]), ranking metrics and
//! fusion protocols ([`retrieval`]), a deterministic synthetic corpus
//! generator ([`data`]), and the training loop ([`train`]).

pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod layers;
pub mod losses;
pub mod retrieval;
pub mod train;

pub use autodiff::{grad_check, Graph, NodeId, Tensor, TensorError};
pub use data::{Corpus, DataError, SampleRecord, Split, SyntheticConfig};
pub use encoders::{EmbeddingBundle, Model, ModelConfig};
pub use layers::{lr_at_epoch, AdamConfig, AdamState, ParamBinder, ParamStore, Parameter};
pub use losses::{CircleConfig, LossKind, MultiLevelConfig, SectionProjection};
pub use retrieval::{
    Direction, DistanceMatrix, FusionProtocol, Metrics, RetrievalReport, SplitEmbeddings,
};
pub use train::{Checkpoint, TrainConfig, TrainError, TrainOutcome};
