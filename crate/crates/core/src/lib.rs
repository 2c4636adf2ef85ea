//! Masked separable attention, a progressive mask-guided decoder with
//! reverse-mode gradients, and a toolkit for scoring saliency-style
//! segmentation maps.

pub mod attention;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
