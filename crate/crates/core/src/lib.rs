//! Audio-conditioned U-Net for locating audio excerpts on sheet-music pages.
//!
//! [`tensor`] holds the autodiff tape the network is built on, [`audio`] and
//! [`dataset`] turn audio, page images and note alignments into training
//! samples, [`model`] is the FiLM-conditioned U-Net, [`train`] and [`eval`]
//! fit and score it, and [`gradcheck`] verifies every gradient against
//! finite differences.

pub mod audio;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
