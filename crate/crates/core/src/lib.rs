//! Polyp segmentation refined by a learned flow: a U-Net backbone proposes
//! coarse logits, and a gated vector field integrated with explicit Euler
//! steps transports them toward the target mask.

pub mod error;
pub mod tensor;
pub mod kernels;
pub mod autograd;
pub mod params;
pub mod ops;
pub mod dct;
pub mod attention;
pub mod unet;
pub mod field;
pub mod ode;
pub mod losses;
pub mod metrics;
pub mod image_io;
pub mod data;
pub mod config;
pub mod optim;
pub mod model;
pub mod checkpoint;
pub mod cli;
pub mod train;
pub mod gradcheck;
pub mod ablate;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor;
