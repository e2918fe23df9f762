//! Deterministic tensor algebra with reverse-mode differentiation over a
//! fixed operator set, plus Adam and reproducible RNG streams.

pub mod adam;
pub mod eval;
pub mod grad;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use eval::{evaluate_graph, EvalOptions, Inputs, Values};
pub use grad::backpropagate;
pub use graph::{ActKind, Graph, NodeId, Op};
pub use params::ParamStore;
pub use rng::{derive_stream, RngStream};
pub use tensor::Tensor;

#[cfg(test)]
mod op_gradchecks;
