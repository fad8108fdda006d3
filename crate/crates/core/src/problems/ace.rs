//! Variational backward-Euler step for the Allen-Cahn equation on the
//! periodic square [−π, π]².
//!
//! One implicit time step minimizes
//!   F(w) = ∫ εΔt/2 ‖∇w‖² + (1−Δt)/2 w² + Δt/4 w⁴ − w̃ w
//! over the grid, where w̃ is the previous step. The first-order
//! optimality condition is the backward-Euler equation
//! w − Δt(εΔw + w − w³) = w̃.

use crate::error::{Error, Result};
use crate::kernels::banded::{build_forward_difference, build_laplacian, BandedMatrix, Boundary};
use crate::kernels::factored::FactoredMatrix;
use crate::manifold::{project, project_dense, Anchor, TangentVector};
use crate::precond::SylvesterOperator;
use crate::rtr::RtrProblem;

use super::{banded_left, banded_right, dense_as_factored, note_ambient_dense, svd_form};

/// Default bound on the raw gradient inner dimension 2r + r³ + r̃.
pub const DEFAULT_GRAD_CAP: usize = 4096;

/// One implicit Allen-Cahn time step as a fixed-rank minimization.
#[derive(Debug, Clone)]
pub struct AceStepProblem {
    /// Periodic discrete Laplacian (+Δ, negative semidefinite).
    a_per: BandedMatrix,
    /// Periodic forward difference; LᵀL = −A gives the Dirichlet energy.
    l_per: BandedMatrix,
    epsilon: f64,
    dt: f64,
    h: f64,
    n: usize,
    w_prev: FactoredMatrix,
    grad_cap: usize,
    sylvester: SylvesterOperator,
}

impl AceStepProblem {
    /// `n` grid points per side with spacing h = 2π/n; `w_prev` is the
    /// previous time step in factored form.
    pub fn new(
        n: usize,
        dt: f64,
        epsilon: f64,
        w_prev: FactoredMatrix,
        grad_cap: Option<usize>,
    ) -> Result<Self> {
        if n < 4 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 4 points per side, got {n}"
            )));
        }
        if !dt.is_finite() || dt < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "time step must be finite and nonnegative, got {dt}"
            )));
        }
        // ε = 0 keeps the pure-reaction step well-posed (the model
        // operator degenerates to (1-Δt)/2 · I).
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "diffusion coefficient must be finite and nonnegative, got {epsilon}"
            )));
        }
        if w_prev.nrows() != n || w_prev.ncols() != n {
            return Err(Error::ShapeMismatch(format!(
                "previous step is {}x{}, expected {n}x{n}",
                w_prev.nrows(),
                w_prev.ncols()
            )));
        }
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let a_per = build_laplacian(n, h, Boundary::Periodic)?;
        let l_per = build_forward_difference(n, h, Boundary::Periodic)?;
        // Model Hessian restriction B with hess ≈ h²(Bξ + ξB):
        // B = εΔt(−A) + (1−Δt)/2 I.
        let b = a_per.scale(-epsilon * dt).add_scaled_identity(0.5 * (1.0 - dt));
        let sylvester = SylvesterOperator::two_sided(b.clone(), b, h * h)?;
        Ok(Self {
            a_per,
            l_per,
            epsilon,
            dt,
            h,
            n,
            w_prev,
            grad_cap: grad_cap.unwrap_or(DEFAULT_GRAD_CAP),
            sylvester,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn w_prev(&self) -> &FactoredMatrix {
        &self.w_prev
    }

    pub fn a_per(&self) -> &BandedMatrix {
        &self.a_per
    }

    fn check_shape(&self, w: &FactoredMatrix) -> Result<()> {
        if w.nrows() != self.n || w.ncols() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "expected a {0}x{0} iterate, got {1}x{2}",
                self.n,
                w.nrows(),
                w.ncols()
            )));
        }
        Ok(())
    }

    /// Σ_ij w_ij⁴, through the Gram matrix of w°² while the squared
    /// inner dimension stays below the grid size, densifying otherwise.
    fn quartic_sum(&self, w: &FactoredMatrix) -> Result<f64> {
        let k = w.inner_dim();
        if k * k >= self.n {
            note_ambient_dense();
            let wd = w.to_dense();
            return Ok(wd.iter().map(|&x| x * x * x * x).sum());
        }
        let wsq = svd_form(w)?.hadamard_square()?;
        wsq.dot(&wsq)
    }

    /// Entrywise cube in factored form (inner dimension k³), densifying
    /// on the same threshold as the quartic.
    fn cube(&self, w: &FactoredMatrix) -> Result<FactoredMatrix> {
        let k = w.inner_dim();
        if k * k >= self.n {
            note_ambient_dense();
            let cubed = w.to_dense().map(|x| x * x * x);
            return dense_as_factored(cubed);
        }
        let ws = svd_form(w)?;
        ws.hadamard_square()?.hadamard_product(&ws)
    }

    pub fn cost_factored(&self, w: &FactoredMatrix) -> Result<f64> {
        self.check_shape(w)?;
        let mut total = 0.5 * (1.0 - self.dt) * w.dot(w)? - self.w_prev.dot(w)?;
        if self.dt != 0.0 {
            let lw = banded_left(&self.l_per, w)?;
            // W·Lᵀ: the column factor picks up L itself.
            let wlt =
                FactoredMatrix::new(w.u().clone(), w.core().clone(), self.l_per.mul_dense(w.v()))?;
            total += 0.5 * self.epsilon * self.dt * (lw.dot(&lw)? + wlt.dot(&wlt)?);
            total += 0.25 * self.dt * self.quartic_sum(w)?;
        }
        Ok(self.h * self.h * total)
    }

    /// Gradient blocks before recompression:
    /// h²[(−εΔtA + (1−Δt)I)W | −εΔt·WA | Δt·W°³ | −W̃], inner dimension
    /// 2k + k³ + k̃ (the cube block is empty when Δt = 0). Exceeding the
    /// configured cap is a rank-budget error.
    pub fn euclid_grad_raw(&self, w: &FactoredMatrix) -> Result<FactoredMatrix> {
        self.check_shape(w)?;
        let k = w.inner_dim();
        let cube_width = if self.dt == 0.0 {
            0
        } else if k * k >= self.n {
            self.n
        } else {
            k * k * k
        };
        let needed = 2 * k + cube_width + self.w_prev.inner_dim();
        if needed > self.grad_cap {
            return Err(Error::RankBudget { needed, budget: self.grad_cap });
        }
        let u1 = self.a_per.mul_dense(w.u()) * (-self.epsilon * self.dt) + w.u() * (1.0 - self.dt);
        let b1 = FactoredMatrix::new(u1, w.core().clone(), w.v().clone())?;
        let b2 = banded_right(w, &self.a_per)?.scale(-self.epsilon * self.dt);
        let mut parts = vec![b1, b2];
        if self.dt != 0.0 {
            parts.push(self.cube(w)?.scale(self.dt));
        }
        parts.push(self.w_prev.scale(-1.0));
        Ok(FactoredMatrix::sum(&parts)?.scale(self.h * self.h))
    }

    /// Euclidean gradient, recompressed to numerical rank.
    pub fn euclid_grad_factored(&self, w: &FactoredMatrix) -> Result<FactoredMatrix> {
        self.euclid_grad_raw(w)?.recompress(1e-14)
    }
}

impl RtrProblem for AceStepProblem {
    fn cost(&self, x: &Anchor) -> Result<f64> {
        self.cost_factored(&x.to_factored())
    }

    fn euclid_grad(&self, x: &Anchor) -> Result<FactoredMatrix> {
        self.euclid_grad_factored(&x.to_factored())
    }

    fn hess_apply(&self, x: &Anchor, xi: &TangentVector) -> Result<TangentVector> {
        // h²(−εΔt(Aξ + ξA) + (1−Δt)ξ) projected, via the Sylvester form.
        let linear = self.sylvester.apply_projected(xi)?;
        if self.dt == 0.0 {
            return Ok(linear);
        }
        let r = x.rank();
        let scale = 3.0 * self.dt * self.h * self.h;
        let had = if r * r >= self.n {
            note_ambient_dense();
            note_ambient_dense();
            let wd = x.to_dense();
            let xid = xi.to_dense();
            let prod = wd.zip_map(&xid, |wx, tx| wx * wx * tx);
            project_dense(x, &prod)?.scale(scale)
        } else {
            let wsq = x.to_factored().hadamard_square()?;
            let prod = wsq.hadamard_product(&xi.to_svd_factored())?;
            project(x, &prod)?.scale(scale)
        };
        linear.add_scaled(&had, 1.0)
    }

    fn precond_operator(&self) -> Option<&SylvesterOperator> {
        // Exactly the linear part of the Hessian; the Hadamard term is
        // dropped.
        Some(&self.sylvester)
    }
}
