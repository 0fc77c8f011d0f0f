//! Dense tensors with tape-based reverse-mode gradients, and the layers,
//! losses, optimizer and checkpoint format built on top of them.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamStore, Parameter, Session};
pub use scalar::Real;
pub use tensor::Tensor;
