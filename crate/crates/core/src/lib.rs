//! Spatiotemporal pyramid flows for climate emulation.
//!
//! A generative model that runs a piecewise flow from coarse space-time
//! resolution (decadal, low-res) to fine (monthly, full-res), with
//! rescale-renoise corrections at every jump, temporal funneling, direct
//! sampling at intermediate timescales and coarse-latent caching for long
//! sequences.

pub mod certify;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod path;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod train;
pub mod transition;

pub use error::{Result, SpfError};
pub use grid::{FieldGrid, ResampleFactors};
pub use model::{ConditioningBundle, ModelConfig, VelocityModel};
pub use path::DeltaPath;
pub use schedule::PyramidSchedule;
