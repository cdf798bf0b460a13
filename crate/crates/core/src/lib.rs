pub mod augment;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nam;
pub mod nn;
pub mod plot;
pub mod spf;
pub mod train;

pub use crate::error::{Error, Result};
