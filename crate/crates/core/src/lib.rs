//! Function-preserving insertion of a sparsified hidden layer into a trained
//! multilayer perceptron.
//!
//! The pipeline is: train a parent [`Mlp`](network::Mlp), pick a layer, and
//! call [`morph::morph`] with a [`MorphSpec`](morph::MorphSpec). The child has
//! one extra layer whose width is chosen by a similarity-penalized Lasso
//! ([`sparse`]) and whose outputs approximate the parent's on a probe batch.

pub mod experiment;
pub mod io;
pub mod linalg;
pub mod morph;
pub mod network;
pub mod sparse;
pub mod verify;

pub use io::{Dataset, IoError};
pub use linalg::{LinalgError, Matrix};
pub use morph::{Algorithm, MorphError, MorphReport, MorphSpec};
pub use network::{Activation, Layer, Mlp, NetworkError, TrainConfig};
pub use sparse::{SparseConfig, SparseSolution, StopReason};
