//! Infrared/visible image fusion with a frequency-spatial attention
//! transformer, built on a small reverse-mode tensor engine.

pub mod dct;
pub mod error;
pub mod fsam;
pub mod image;
pub mod itm;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
