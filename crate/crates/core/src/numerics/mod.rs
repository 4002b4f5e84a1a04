//! Dense tensors, seeded random streams and symmetric eigendecomposition.

mod linalg;
mod rng;
mod tensor;

pub use linalg::{check_symmetric, fix_sign, orthonormalize_columns, psd_factor, sym_eig, SymEig};
pub use rng::{fill_standard_normal, standard_normal, gaussian_noise, Purpose, RngStream};
pub use tensor::{dot, norm, pairwise_sum, Tensor};
pub(crate) use tensor::read_u64;
