//! Mixed-domain semi-supervised segmentation with correlation-map image
//! synthesis, virtual-domain mixing and prototype classifiers.

pub mod backbone;
pub mod corrsynth;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mixing;
pub mod protohead;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Rng, Scalar, Tape, Tensor, Var};
