//! Semi-supervised video inpainting.
//!
//! Given a corrupted clip and the corruption mask of one annotated frame, a
//! completion network fills the holes of each frame from aligned temporal
//! neighbours and a mask prediction network locates the corruption of the
//! next frame by comparing it with the completed one. Both networks are
//! trained jointly with a cycle-consistency term on synthetic corruption data.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod image;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
