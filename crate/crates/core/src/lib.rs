//! Camera-aware domain adaptation laboratory.
//!
//! The crate implements, end to end and on a minimal reverse-mode autodiff
//! engine, the pieces of a cross-domain person re-identification adaptation
//! pipeline: camera-adversarial losses (discriminator cross-entropy plus
//! GRL / CCE / AOE / DAL generator schemes), unsupervised online triplet
//! mining over temporal fragments with optional k-reciprocal re-ranking,
//! an alternating trainer, retrieval metrics (mAP / CMC), and a synthetic
//! multi-camera world generator for desk-scale experiments.

pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod losses;
pub mod miner;
pub mod model;
pub mod optim;
pub mod oracles;
pub mod rerank;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use domain::{CameraIndexer, Domain};
pub use error::{Error, Result};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
