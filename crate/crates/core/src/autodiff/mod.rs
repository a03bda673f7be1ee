//! Reverse-mode automatic differentiation over dense `f64` matrices.

mod adam;
mod checkpoint;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, MAGIC};
pub use tape::{BinaryKind, ParamId, ParamStore, Tape, UnaryKind, Var};
pub use tensor::Tensor;

pub(crate) use tape::softplus;
