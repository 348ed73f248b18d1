//! Toy-scale neural reconstruction: autodiff, attention blocks, the
//! unrolled network and its training loop.

pub mod blocks;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use model::{dmdc_forward, init_dmdc, NetConfig};
pub use params::{Graph, Init, ModelParams, ParamEntry};
pub use tape::{Grads, LinearMap, Padding, ShearGeometry, Tape, Tensor, Var};
pub use train::{train_dmdc, MaskPolicy, TrainConfig, TrainData, TrainOutcome};
