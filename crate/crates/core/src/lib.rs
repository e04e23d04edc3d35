//! Learning from incomplete images with spatial graph convolutions.
//!
//! An image with unknown pixels becomes a [`imagegraph::PixelGraph`] with one
//! node per observed pixel. Spatial graph convolution layers weight each
//! neighbor by a ReLU of an affine map of its relative offset, which is
//! expressive enough to reproduce any 3x3 convolution exactly
//! (see [`equiv`]).

pub mod data;
pub mod equiv;
pub mod error;
pub mod experiments;
pub mod graphconv;
pub mod imagegraph;
pub mod imputation;
pub mod nn;
pub mod parallel;
pub mod refconv;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Parameter, Shape, Tensor};
