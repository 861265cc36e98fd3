//! Dense-tensor reverse-mode autodiff, small conditioned MLPs, and the Adam
//! optimizer: the substrate every loss and trainer runs on.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod mlp;
pub mod tensor;

pub use adam::{AdamConfig, OptState};
pub use graph::{sigmoid, Graph, NodeId};
pub use mlp::{Activation, Conditioning, GraphNet, Mlp};
pub use tensor::Tensor;
