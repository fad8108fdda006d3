//! Structured linear-algebra kernels: banded matrices on 1D grids and
//! factored (low-rank) matrices with a Hadamard-product algebra.

pub mod banded;
pub mod factored;

pub use banded::{
    build_forward_difference, build_laplacian, shifted_solve, BandedFactor, BandedMatrix, Boundary,
};
pub use factored::{khatri_rao_t, Core, FactoredMatrix};
