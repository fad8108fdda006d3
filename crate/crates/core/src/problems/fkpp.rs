//! Variational leapfrog (CNLF) step for an ensemble of 1D Fisher-KPP
//! realizations.
//!
//! Columns of the iterate are independent realizations with per-column
//! reaction rates. One step minimizes
//!   F(X) = ½‖MₘX‖² − ⟨MₘᵀMₚW⁽ⁿ⁻¹⁾, X⟩ + 2Δt⟨Mₘᵀ(W⁽ⁿ⁾°² − W⁽ⁿ⁾)R, X⟩
//! with Mₘ = I − ΔtA, Mₚ = I + ΔtA, whose optimality condition is the
//! Crank-Nicolson leapfrog update
//!   MₘX = MₚW⁽ⁿ⁻¹⁾ + 2Δt(W⁽ⁿ⁾ − W⁽ⁿ⁾°²)R.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::banded::BandedMatrix;
use crate::kernels::factored::FactoredMatrix;
use crate::manifold::{Anchor, TangentVector};
use crate::precond::SylvesterOperator;
use crate::rtr::RtrProblem;

use super::{banded_left, svd_form};

/// One ensemble CNLF time step as a fixed-rank minimization.
#[derive(Debug, Clone)]
pub struct FkppStepProblem {
    mm: BandedMatrix,
    mp: BandedMatrix,
    /// MₘᵀMₘ, the quadratic form of the energy.
    b_gram: BandedMatrix,
    rates: DVector<f64>,
    w_n: FactoredMatrix,
    w_nm1: FactoredMatrix,
    w_n_sq: FactoredMatrix,
    /// Constant gradient blocks, assembled once per step:
    /// [−MₘᵀMₚW⁽ⁿ⁻¹⁾ | 2ΔtMₘᵀW⁽ⁿ⁾°²R | −2ΔtMₘᵀW⁽ⁿ⁾R].
    grad_tail: FactoredMatrix,
    dt: f64,
    sylvester: SylvesterOperator,
}

impl FkppStepProblem {
    /// `a` is the spatial operator (discrete Neumann Laplacian); `rates`
    /// holds one reaction rate per realization column.
    pub fn new(
        a: &BandedMatrix,
        rates: DVector<f64>,
        w_n: &FactoredMatrix,
        w_nm1: &FactoredMatrix,
        dt: f64,
    ) -> Result<Self> {
        if !dt.is_finite() || dt < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "time step must be finite and nonnegative, got {dt}"
            )));
        }
        let nx = a.n();
        let nr = rates.len();
        for w in [w_n, w_nm1] {
            if w.nrows() != nx || w.ncols() != nr {
                return Err(Error::ShapeMismatch(format!(
                    "state is {}x{}, expected {nx}x{nr}",
                    w.nrows(),
                    w.ncols()
                )));
            }
        }
        if rates.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("reaction rates"));
        }
        let mm = a.scale(-dt).add_scaled_identity(1.0);
        let mp = a.scale(dt).add_scaled_identity(1.0);
        let b_gram = mm.gram_product()?;
        let w_n = svd_form(w_n)?;
        let w_nm1 = svd_form(w_nm1)?;
        let w_n_sq = w_n.hadamard_square()?;

        let mmt = mm.transpose();
        let mtmp = mmt.matmul(&mp)?;
        let t_hist = FactoredMatrix::new(
            mtmp.mul_dense(w_nm1.u()),
            w_nm1.core().scale(-1.0),
            w_nm1.v().clone(),
        )?;
        let t_sq = FactoredMatrix::new(
            mmt.mul_dense(w_n_sq.u()),
            w_n_sq.core().scale(2.0 * dt),
            row_scale(w_n_sq.v(), &rates),
        )?;
        let t_lin = FactoredMatrix::new(
            mmt.mul_dense(w_n.u()),
            w_n.core().scale(-2.0 * dt),
            row_scale(w_n.v(), &rates),
        )?;
        let grad_tail = FactoredMatrix::sum(&[t_hist, t_sq, t_lin])?;
        let sylvester = SylvesterOperator::one_sided(b_gram.clone(), 1.0)?;
        Ok(Self { mm, mp, b_gram, rates, w_n, w_nm1, w_n_sq, grad_tail, dt, sylvester })
    }

    pub fn nx(&self) -> usize {
        self.mm.n()
    }

    pub fn n_realizations(&self) -> usize {
        self.rates.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn mm(&self) -> &BandedMatrix {
        &self.mm
    }

    pub fn mp(&self) -> &BandedMatrix {
        &self.mp
    }

    pub fn rates(&self) -> &DVector<f64> {
        &self.rates
    }

    pub fn w_n(&self) -> &FactoredMatrix {
        &self.w_n
    }

    pub fn w_nm1(&self) -> &FactoredMatrix {
        &self.w_nm1
    }

    /// Cached entrywise square of the current state.
    pub fn w_n_sq(&self) -> &FactoredMatrix {
        &self.w_n_sq
    }

    fn check_shape(&self, w: &FactoredMatrix) -> Result<()> {
        if w.nrows() != self.nx() || w.ncols() != self.n_realizations() {
            return Err(Error::ShapeMismatch(format!(
                "expected a {}x{} iterate, got {}x{}",
                self.nx(),
                self.n_realizations(),
                w.nrows(),
                w.ncols()
            )));
        }
        Ok(())
    }

    pub fn cost_factored(&self, w: &FactoredMatrix) -> Result<f64> {
        self.check_shape(w)?;
        let bw = banded_left(&self.b_gram, w)?;
        Ok(0.5 * bw.dot(w)? + self.grad_tail.dot(w)?)
    }

    /// Euclidean gradient MₘᵀMₘW + tail; inner dimension
    /// k + k̃₁ + kₙ² + kₙ with no recompression, so the block structure
    /// is exact.
    pub fn euclid_grad_factored(&self, w: &FactoredMatrix) -> Result<FactoredMatrix> {
        self.check_shape(w)?;
        FactoredMatrix::sum(&[banded_left(&self.b_gram, w)?, self.grad_tail.clone()])
    }
}

fn row_scale(v: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = v.clone();
    for i in 0..out.nrows() {
        out.row_mut(i).scale_mut(d[i]);
    }
    out
}

impl RtrProblem for FkppStepProblem {
    fn cost(&self, x: &Anchor) -> Result<f64> {
        self.cost_factored(&x.to_factored())
    }

    fn euclid_grad(&self, x: &Anchor) -> Result<FactoredMatrix> {
        self.euclid_grad_factored(&x.to_factored())
    }

    fn hess_apply(&self, _x: &Anchor, xi: &TangentVector) -> Result<TangentVector> {
        self.sylvester.apply_projected(xi)
    }

    fn precond_operator(&self) -> Option<&SylvesterOperator> {
        Some(&self.sylvester)
    }
}
