//! Conditional adversarial segmentation of mammographic masses, with a
//! downstream shape classifier and tumour-subtype association analysis.
//!
//! The numeric core (tensors, autodiff, networks, losses, optimizer) is
//! generic over the floating-point scalar via [`scalar::Scalar`]; the
//! rest of the crate works with the `f64`-backed aliases exported from
//! this root.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod morpho;
pub mod nets;
pub mod optim;
pub mod pgm;
pub mod scalar;
pub mod shape_analysis;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Crate-wide scalar type: all pipelines run in 64-bit floats.
pub type Scalar = f64;

/// Dense tensor over the crate-wide scalar.
pub type Tensor = tensor::Tensor<Scalar>;

/// Autodiff tape over the crate-wide scalar.
pub type Tape = tape::Tape<Scalar>;

/// Adam optimizer over the crate-wide scalar.
pub type Adam = optim::Adam<Scalar>;

/// Network weights specialized to the default scalar type.
pub type Weights = nets::Weights<Scalar>;
