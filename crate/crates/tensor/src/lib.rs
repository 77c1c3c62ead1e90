//! Dense `f64` tensors with tape-based reverse-mode differentiation, the
//! layers needed by small time-series classifiers, and the Adam optimizer.

mod error;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod optim;
mod param;
pub mod tape;
mod tensor;

pub use error::{NnError, Result};
pub use layers::{BatchNorm, Conv1d, Conv2d, Dense, Lstm};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use param::{read_container, write_container, Init, ParamId, ParamStore, Parameter};
pub use tape::{BatchStats, Mode, NormStats, Tape, Var};
pub use tensor::Tensor;
