//! Sparse-input neural radiance fields trained with augmentation-based depth
//! supervision.
//!
//! The main NeRF (coarse + fine) is trained in tandem with two simplified
//! coarse models: one with a reduced positional-encoding band for density and
//! one with view-independent color. Their expected depths supervise the main
//! coarse model wherever a patch reprojection test says they are more reliable,
//! and the coarse and fine depths are pulled together the same way.

pub mod camera;
pub mod config;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod exec;
pub mod field;
pub mod io;
pub mod gradcheck;
pub mod losses;
mod linalg;
pub mod raster;
pub mod reliability;
pub mod render;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
