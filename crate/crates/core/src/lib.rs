//! Interactive sketch question answering at desk scale.

pub mod autodiff;
pub mod edges;
pub mod error;
pub mod evaluation;
pub mod feedback;
mod nn;
pub mod params;
pub mod protocol;
pub mod receiver;
pub mod sender;
pub mod shapeworld;
pub mod sketch;
pub mod training;

pub use error::{Error, Result};
