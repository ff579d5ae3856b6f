//! Augmented feature-pyramid neck built on a small reverse-mode autodiff
//! engine: consistent supervision of the lateral features, a residual
//! context branch on the top level, and learned fusion of RoI features from
//! every pyramid level.

pub mod error;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod params;
pub mod pyramid;
pub mod roi;
pub mod supervision;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::{DType, Real, Tensor};
