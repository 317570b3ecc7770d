//! Minimal reverse-mode differentiation over dense `f64` tensors.

pub mod conv;
mod optim;
mod param;
mod tape;
mod tensor;

pub use optim::SgdMomentum;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{saturating_sigmoid_values, BnConfig, BnMode, BnStats, Gradients, PlaneMask, Tape, Var};
pub use tensor::Tensor;
