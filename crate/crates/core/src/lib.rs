//! Feed-forward artistic style transfer on a Laplacian pyramid.
//!
//! A drafting network stylizes a low-resolution copy of the content image
//! using AdaIN-modulated encoder features; revision networks then predict
//! residual detail images at successively doubled resolutions, which are
//! added to the upsampled draft. Training uses relaxed EMD, mean-variance,
//! normalized perceptual and self-similarity losses on a frozen VGG feature
//! extractor, plus a shallow patch discriminator for the revision stages.

pub mod archive;
pub mod bundle;
pub mod data;
pub mod discriminator;
pub mod drafting;
pub mod error;
pub mod extractor;
pub mod graph;
pub mod imagery;
pub mod losses;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod par;
pub mod revision;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use imagery::{Image, PyramidDecomposition};
pub use tensor::Tensor;
