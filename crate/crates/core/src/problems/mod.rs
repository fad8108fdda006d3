//! The four benchmark energies, each exposed as an [`RtrProblem`].
//!
//! Two elliptic energies on the unit square ([`LyapProblem`],
//! [`NpdeProblem`]) and two variational time-step energies
//! ([`AceStepProblem`], [`FkppStepProblem`]). Every problem evaluates its
//! cost and Euclidean gradient in factored form; an ambient (full grid
//! size) dense matrix is materialized only on the documented fallback
//! paths, and each such materialization is counted so tests can assert
//! the factored paths never densify.
//!
//! [`RtrProblem`]: crate::rtr::RtrProblem

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;

use crate::error::Result;
use crate::kernels::banded::BandedMatrix;
use crate::kernels::factored::{Core, FactoredMatrix};

mod ace;
mod elliptic;
mod fkpp;

pub use ace::AceStepProblem;
pub use elliptic::{gamma_source, lyap_residual, LyapProblem, NpdeProblem, GAMMA_RANK};
pub use fkpp::FkppStepProblem;

/// Number of ambient (grid-sized) dense matrices materialized by problem
/// evaluations since process start. Monotone; measure deltas around a
/// region of interest.
pub fn ambient_dense_allocations() -> u64 {
    AMBIENT_DENSE.load(Ordering::Relaxed)
}

static AMBIENT_DENSE: AtomicU64 = AtomicU64::new(0);

pub(crate) fn note_ambient_dense() {
    AMBIENT_DENSE.fetch_add(1, Ordering::Relaxed);
}

/// A·W in factored form: only the row factor changes.
pub(crate) fn banded_left(a: &BandedMatrix, w: &FactoredMatrix) -> Result<FactoredMatrix> {
    FactoredMatrix::new(a.mul_dense(w.u()), w.core().clone(), w.v().clone())
}

/// W·A in factored form: the column factor picks up Aᵀ.
pub(crate) fn banded_right(w: &FactoredMatrix, a: &BandedMatrix) -> Result<FactoredMatrix> {
    FactoredMatrix::new(w.u().clone(), w.core().clone(), a.transpose().mul_dense(w.v()))
}

/// Returns an equal matrix with a diagonal core, as required by the
/// Hadamard algebra. Diagonal-core inputs are passed through unchanged.
pub(crate) fn svd_form(w: &FactoredMatrix) -> Result<FactoredMatrix> {
    match w.core() {
        Core::Diag(_) => Ok(w.clone()),
        Core::Dense(_) => w.recompress(0.0),
    }
}

/// Wraps a dense matrix as a factored one with an identity column factor.
/// Inner dimension equals the column count; used by dense fallback paths.
pub(crate) fn dense_as_factored(d: DMatrix<f64>) -> Result<FactoredMatrix> {
    let n = d.ncols();
    let ones = nalgebra::DVector::from_element(n, 1.0);
    FactoredMatrix::new(d, Core::Diag(ones), DMatrix::identity(n, n))
}
