//! 3D multi-class segmentation of multi-modal volumes with a residual
//! U-shape network.

pub mod config;
pub mod error;
pub mod graph;
pub mod grid;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod parallel;
pub mod plot;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod volume_io;

pub use error::{Error, Result};
pub use grid::{AxisSet, Grid3, ScalarGrid, Shape3, Spacing};
pub use tensor::Tensor;
