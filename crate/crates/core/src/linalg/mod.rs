//! Dense linear algebra, symmetric eigendecomposition, 2-D FFT and the
//! seedable generator used throughout the crate.

mod eig;
mod fft;
mod matrix;
mod rng;

pub use eig::{
    inv_sqrt_from_eig, kron_spectrum, sym_eig, SymEig, JACOBI_MAX_DIM, JACOBI_MAX_SWEEPS,
    JACOBI_TOL, SYMMETRY_TOL,
};
pub use fft::{fft2, ifft2, ComplexGrid};
pub use matrix::{axpy, dot, norm2, DenseMatrix};
pub use num_complex::Complex64;
pub use rng::Rng;
