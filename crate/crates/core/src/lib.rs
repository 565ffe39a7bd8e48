//! Learned lossless compression of point cloud colors with a multiscale
//! sparse-convolutional context model.
//!
//! Geometry is assumed to be known at the decoder. Colors are coded with a
//! range coder driven by discretized logistic mixtures whose parameters are
//! predicted scale by scale from coarser latent representations.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod likelihood;
pub mod matrix;
pub mod model;
pub mod nn;
pub mod pc_io;
pub mod quantizer;
pub mod range_coder;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
