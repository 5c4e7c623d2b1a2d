//! Inter-sequence enhanced sequential recommendation.
//!
//! The pipeline reads an interaction log, splits every user's history
//! chronologically, builds a user-item bipartite graph and an item-item
//! co-occurrence graph from the training segment, and trains a model that
//! encodes each context item with two sampled graph convolutions plus a
//! residual branch, runs the fused item sequence through a GRU with a
//! user-personalized attention layer, and scores candidates by inner product
//! with the resulting interest vector.
//!
//! Everything is computed on `f64` with hand-written backward passes; see
//! [`numerics`] for the kernels and [`model`] for the assembled network.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder_loss;
pub mod error;
pub mod graphs;
pub mod inter_encoder;
pub mod intra_encoder;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{TrainConfig, Variant};
pub use data::{InteractionLog, SplitDataset, TrainingInstance};
pub use error::{Error, Result};
pub use graphs::{BipartiteGraph, CoocGraph};
pub use metrics::MetricsReport;
pub use model::{Model, ModelParams};
