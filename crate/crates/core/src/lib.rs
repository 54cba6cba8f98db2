//! Meta-learning for text-independent speaker verification on synthetic data.
//!
//! The crate holds a small reverse-mode autodiff engine, a synthetic
//! corpus generator, an x-vector style embedding network with optional
//! per-layer transformation coefficients, the episodic and global training
//! objectives, and verification scoring.

pub mod config;
pub mod episode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod grad;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod network;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use features::{FeatureMatrix, FrameBatch};
pub use grad::{Graph, Tensor, Var};
pub use network::{Checkpoint, NetworkConfig, NetworkDims, NetworkParams, TransformCoeffs};
pub use synth::{Corpus, CorpusConfig};
pub use train::{System, TrainConfig};
