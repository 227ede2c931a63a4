//! Dense box regression with boundary decomposition and recombination,
//! semantic-consistency label assignment, and a synthetic training harness
//! for exercising both.

pub mod assignment;
pub mod cli;
pub mod dnr;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod losses;
pub mod postproc;
pub mod simtrain;

pub use error::{Error, Result};
pub use exec::ExecMode;
pub use geometry::{BBox, Distances, Point, Side};
