//! Bit-accurate software model of a quantized PointNet accelerator.

pub mod accel;
pub mod error;
pub mod fixq;
pub mod matrix;
pub mod pointnet;
pub mod tile_mm;

pub use error::{CoreError, Result};
