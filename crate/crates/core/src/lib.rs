//! Layer-wise transform selection for simulated post-training quantization.
//!
//! Each linear layer can be pre-conditioned with either a Kronecker-factored
//! affine transform or an orthogonal rotation before its activations and
//! weights are fake-quantized. This crate scores layers by weight kurtosis,
//! assigns transforms with an order-statistic heuristic or a softmax mixture
//! search, and measures reconstruction error against fixed and oracle plans.

pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod quant;
pub mod search;
pub mod selector;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
