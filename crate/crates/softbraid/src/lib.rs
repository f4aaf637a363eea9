//! Soft-braid trajectory refinement.
//!
//! Multi-agent trajectory forecasts are refined iteratively: a coarse
//! set of future modes per agent is encoded, each agent attends over the
//! agents and lanes it is topologically entangled with (soft braids:
//! closest same-time approaches between future paths), and a learned
//! head emits local-frame offsets. Updated futures induce an updated
//! topology for the next iteration.
//!
//! Layering, bottom up:
//! - [`geometry`]: frames, angle wrapping, finite-difference kinematics.
//! - [`topology`]: soft intersections, braid features, neighborhoods.
//! - [`autodiff`]: the reverse-mode tape the refiner trains on.
//! - [`nn`]: MLP and cross-attention blocks over the tape.
//! - [`archive`]: the on-disk parameter format.

pub mod archive;
pub mod autodiff;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod refiner;
pub mod scenario;
pub mod seeds;
pub mod topology;
pub mod train;

pub use error::{Error, Result};
