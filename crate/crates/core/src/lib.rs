//! Matrix completion with a deep conditional random field over rating
//! entries: a two-branch embedding network produces per-entry label
//! distributions and learned similarities, and unfolded mean-field layers
//! refine the distributions by message passing between observed entries.
//!
//! The crate is self-contained: dense `f64` tensors, reverse-mode autodiff,
//! Adam, data loading/splitting, the model itself, training, prediction,
//! and a classical neighborhood baseline for comparison.

pub mod basenet;
pub mod dataio;
pub mod error;
pub mod knn;
pub mod meanfield;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod predictor;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, NodeId};
pub use params::{
    adam_step, load_checkpoint, save_checkpoint, AdamConfig, AdamState, ParamStore,
};
pub use tensor::Tensor;
