//! Tensor building blocks on top of candle's autograd tape.

pub mod layers;
pub mod ops;

pub use self::layers::{Ctx, Param, ParamKind, ParamStore, RunningStats};
