//! Surface-height regression from 8-bit Earth-embedding rasters.

pub mod autodiff;
pub mod error;
pub mod grid;
pub mod ingest;
pub mod metrics;
pub mod nets;
pub mod patchset;
pub mod preprocess;
pub mod ridge;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use nets::{NetworkSpec, Variant};
pub use preprocess::PairedGrid;
pub use trainer::TrainConfig;
pub use grid::{DType, GeoTransform, Grid, GridData};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
