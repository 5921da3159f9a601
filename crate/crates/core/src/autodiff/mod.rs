//! Minimal reverse-mode automatic differentiation over dense `f64` matrices,
//! plus the feed-forward network and SGD optimizer built on it.

mod graph;
mod nn;
mod optim;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use nn::{
    argmax_rows, Activation, DenseLayer, DenseNetwork, LayerRecord, LayerVars, NetworkCheckpoint,
    NETWORK_FORMAT, NETWORK_VERSION,
};
pub use optim::{AdamState, OptimizerState};
pub use tensor::Tensor;
