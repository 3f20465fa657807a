//! Dense `f64` tensors, a reverse-mode tape, the parameter store and AdamW.

mod adamw;
mod params;
mod tape;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::{label_smoothed_ce, softmax, Tensor};
