//! Uncertainty-aware embedding learning for retrieval.
//!
//! A small network maps each input to a Gaussian embedding: a feature mean,
//! a learned scalar data uncertainty, and a model uncertainty estimated from
//! Bernoulli weight-mask draws. The uncertainties drive query gating and
//! reliability-weighted multi-query fusion.

pub mod error;
pub mod eval;
pub mod inference;
pub mod loss;
pub mod model;
pub mod numcore;
pub mod reliability;
pub mod synthdata;
pub mod textio;
pub mod trainer;

pub use error::{Error, Result};
pub use inference::{GaussianEmbedding, MaskSet};
pub use model::{Network, NetworkDims, Pooling};
pub use numcore::{Tape, Tensor, Var};
pub use synthdata::{DatasetSpec, LabeledSample};
pub use trainer::TrainConfig;
