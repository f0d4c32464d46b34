//! Dense tensors, a reverse-mode tape, and parameterized layers.

pub mod nn;
pub mod tape;
pub mod tensor;

pub use nn::{LayerNorm, Linear, ParamId, ParamStore};
pub use tape::{sigmoid, softplus, softplus_inv, zoh, BinaryKind, Gradients, Tape, UnaryKind, Var};
pub use tensor::Tensor;
