//! Dense real and complex linear algebra used by the adapters and the model.

pub mod cmatrix;
pub mod counter;
pub mod expm;
pub mod fdiff;
pub mod fft;
pub mod lu;
pub mod matrix;
pub mod svd;

pub use cmatrix::{cdot, cnorm2, frobenius_norm, CMatrix, FrobeniusNorm, C64};
pub use expm::matrix_exp;
pub use fdiff::{finite_diff_grad, relative_error};
pub use fft::{fft_apply, householder_apply, ifft_apply};
pub use matrix::{matmul, Matrix};
pub use svd::{csvd, polar_project, polar_project_unitary, svd, truncated_svd, CSvdResult, SvdResult};
