//! Dense `f32` matrices with `f64` accumulation, plus the small set of
//! kernels the rest of the crate is built on.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{
    frobenius_mse, hadamard, invert, invert_capped, kron, kron_apply, matmul, matmul_nt,
    matmul_tn, mean_squared_error, qr_orthogonal, DEFAULT_CONDITION_CAP,
};
pub(crate) use linalg::{dense, invert_f64};
pub use matrix::Tensor;
pub use rng::{Seed, SplitMix64};
