//! Multi-scale attention-map merging kernels for encoder-decoder
//! segmentation, with complexity accounting, segmentation metrics and the
//! verification harness behind the `ammunet` CLI.

// `!(a > b)` is used throughout to reject NaN along with the failing range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod cli;
pub mod error;
pub mod merge;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod synth;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
