//! Single-step non-autoregressive sequence transducer built around an
//! index-mapping-vector (IMV) alignment generator, distance-aware attention
//! reconstruction and a convolutional alignment predictor.
//!
//! Everything is composed from a small reverse-mode tape ([`tape::Tape`])
//! over dense tensors. The main entry points are:
//!
//! - [`alignment`]: the alignment generator and attention reconstruction.
//! - [`predictor`]: the alignment predictor and output-length rule.
//! - [`model`]: the full training graph and the single-step inference graph.
//! - [`data`], [`eval`], [`bench`], [`viz`], [`checkpoint`]: corpus
//!   generation, scoring, timing, heatmaps and persistence.

pub mod alignment;
pub mod bench;
pub mod checkpoint;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod predictor;
pub mod tape;
mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
