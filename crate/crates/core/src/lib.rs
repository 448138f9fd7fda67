//! FDDWNet: a lightweight encoder-decoder for real-time semantic
//! segmentation built from factorized dilated depthwise-separable
//! convolutions, with cost analysis, reverse-mode training, a weight
//! archive format and a command-line front end.

pub mod analysis;
pub mod archive;
pub mod autograd;
pub mod bench;
pub mod cli;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::NetworkGraph;
pub use rng::Rng;
pub use tensor::{Scalar, Shape, Tensor};
