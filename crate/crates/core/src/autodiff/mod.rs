//! Dense tensor arithmetic with reverse-mode differentiation.

pub mod graph;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use graph::{forward, forward_train, Graph, LayerSpec};
pub use ops::{
    dropout, entropy_values, smoothed_labels, softmax, softmax_xent_values, ActivationKind,
    DropoutMode,
};
pub use tape::{Gradients, NodeId, Tape, TapeBuilder};
pub use tensor::Tensor;
