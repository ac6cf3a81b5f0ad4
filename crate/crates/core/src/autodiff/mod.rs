//! Minimal deterministic reverse-mode differentiation over `f64` tensors.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use optim::{OptimKind, OptimState};
pub use params::{Bindings, ParamSet};
pub use tape::{BatchNormMode, BatchStats, Gradients, OpKind, Tape, Var, BN_VAR_FLOOR, LEAKY_SLOPE};
pub use tensor::Tensor;
