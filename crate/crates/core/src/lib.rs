//! Training-free calibration of vision-transformer token features for
//! open-vocabulary semantic segmentation.

pub mod adjust;
pub mod anomaly;
pub mod cli;
pub mod container;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod vit;

pub use error::{Error, Result};
