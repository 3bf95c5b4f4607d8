//! Sparse-upcycled mixture-of-experts dual encoders at desk scale.
//!
//! A small reverse-mode autodiff engine ([`graph`]) drives a two-tower
//! transformer ([`model`]) whose feed-forward blocks may be capacity-limited
//! top-K MoE layers ([`moe`]). Dense checkpoints are converted to MoE
//! checkpoints by [`upcycle`], trained by [`train`], and audited with
//! retrieval metrics, router traces and a FLOPs estimator.

pub mod analytics;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod graph;
pub mod model;
pub mod moe;
pub mod params;
pub mod spec;
pub mod tensor;
pub mod train;
pub mod upcycle;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use spec::{BackboneMode, Modality, ModelSpec, MoeModality, MoeSpec, TowerSpec};
pub use tensor::Tensor;
