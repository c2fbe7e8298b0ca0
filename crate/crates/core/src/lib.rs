//! Attribute-assisted sketch-to-photo face identification.
//!
//! Photos and (sketch, attribute) pairs are embedded by two coupled
//! convolutional networks into a shared metric space, trained jointly with a
//! contrastive verification loss and per-attribute classification losses, and
//! probes are identified by nearest-neighbour search over a photo gallery.

pub mod augment;
pub mod cli;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod losses;
pub mod network;
pub mod sampler;
pub mod seed;
pub mod synth;
pub mod sketch;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
