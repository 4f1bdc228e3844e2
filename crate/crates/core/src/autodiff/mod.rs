//! Tensors, reverse-mode differentiation and optimization.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;


pub use optim::{Adam, AdamConfig};
pub use params::{Bindings, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
