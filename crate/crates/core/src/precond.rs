//! Exact inverse of the projected Sylvester-type model operator
//! H_X: ξ ↦ P_X(c·(Bξ + ξC)) on the tangent space of the fixed-rank
//! manifold, used as a trust-region preconditioner.
//!
//! The inverse rotates the tangent parametrization so the r×r
//! restrictions of B and C become diagonal, solves one saddle-point
//! system per transformed column for the Up/Vp blocks, and one dense
//! r²×r² system coupling the M block through the perfect-shuffle
//! permutation.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernels::banded::{BandedFactor, BandedMatrix};
use crate::kernels::factored::FactoredMatrix;
#[cfg(debug_assertions)]
use crate::manifold::random_tangent;
use crate::manifold::{project, Anchor, TangentVector};

/// Default cap on the point rank; the coupled core system is r²×r² dense.
pub const DEFAULT_RANK_CAP: usize = 40;

/// Symmetric two-sided operator ξ ↦ c·(Bξ + ξC). C may be absent, which
/// means C = 0 (one-sided operator).
#[derive(Debug, Clone)]
pub struct SylvesterOperator {
    b: BandedMatrix,
    c: Option<BandedMatrix>,
    scale: f64,
}

impl SylvesterOperator {
    pub fn new(b: BandedMatrix, c: Option<BandedMatrix>, scale: f64) -> Result<Self> {
        if !b.is_symmetric() {
            return Err(Error::InvalidArgument("left operator must be symmetric".into()));
        }
        if let Some(c) = &c {
            if !c.is_symmetric() {
                return Err(Error::InvalidArgument("right operator must be symmetric".into()));
            }
        }
        if !scale.is_finite() {
            return Err(Error::NonFinite("operator scale"));
        }
        Ok(Self { b, c, scale })
    }

    pub fn two_sided(b: BandedMatrix, c: BandedMatrix, scale: f64) -> Result<Self> {
        Self::new(b, Some(c), scale)
    }

    pub fn one_sided(b: BandedMatrix, scale: f64) -> Result<Self> {
        Self::new(b, None, scale)
    }

    pub fn left(&self) -> &BandedMatrix {
        &self.b
    }

    pub fn right(&self) -> Option<&BandedMatrix> {
        self.c.as_ref()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Dense evaluation c·(BX + XC); used by oracles and small problems.
    pub fn apply_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.b.mul_dense(x);
        if let Some(c) = &self.c {
            out += c.mul_dense_right(x);
        }
        out * self.scale
    }

    /// Projected application H_X(ξ) = P_X(c·(Bξ + ξC)) without forming
    /// any dense ambient matrix. This is the operator the preconditioner
    /// context inverts exactly.
    pub fn apply_projected(&self, xi: &TangentVector) -> Result<TangentVector> {
        let f = xi.to_factored();
        let mut parts = Vec::with_capacity(2);
        parts.push(FactoredMatrix::new(
            self.b.mul_dense(f.u()),
            f.core().scale(self.scale),
            f.v().clone(),
        )?);
        if let Some(c) = &self.c {
            parts.push(FactoredMatrix::new(
                f.u().clone(),
                f.core().scale(self.scale),
                c.mul_dense(f.v()),
            )?);
        }
        let z = FactoredMatrix::sum(&parts)?;
        project(xi.anchor(), &z)
    }
}

/// Permutation of length r² with perm[i + j·r] = j + i·r, so that
/// permuting vec(X) by it yields vec(Xᵀ). It is its own inverse.
pub fn perfect_shuffle(r: usize) -> Vec<usize> {
    let mut perm = vec![0; r * r];
    for i in 0..r {
        for j in 0..r {
            perm[i + j * r] = j + i * r;
        }
    }
    perm
}

enum SchurFactor {
    Cholesky(Cholesky<f64, Dyn>),
    Lu(nalgebra::FullPivLU<f64, Dyn, Dyn>),
}

impl SchurFactor {
    fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SchurFactor::Cholesky(c) => c.solve(rhs),
            SchurFactor::Lu(lu) => lu.solve(rhs).expect("factor certified nonsingular"),
        }
    }
}

/// Schur pieces for the constrained system: G = F⁻¹Û and a factorization
/// of S = ÛᵀG. Fails when S is numerically singular (condition estimate
/// above 1e12). S is symmetric, so a Cholesky factorization is tried
/// first, with a pivoted fallback when S is indefinite.
fn schur_pieces(
    factor: &BandedFactor,
    basis: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, SchurFactor)> {
    assert_eq!(basis.nrows(), factor.n(), "basis rows must match system size");
    let g = factor.solve(basis);
    let s = basis.transpose() * &g;
    let s = (&s + s.transpose()) * 0.5;
    let eig = s.clone().symmetric_eigen();
    let mut lmin = f64::INFINITY;
    let mut lmax = 0.0f64;
    for &l in eig.eigenvalues.iter() {
        lmin = lmin.min(l.abs());
        lmax = lmax.max(l.abs());
    }
    let cond = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::IllConditioned { cond });
    }
    let s_solver = match Cholesky::new(s.clone()) {
        Some(c) => SchurFactor::Cholesky(c),
        None => SchurFactor::Lu(s.full_piv_lu()),
    };
    Ok((g, s_solver))
}

/// Solver for the saddle-point system
/// [[F, Û], [Ûᵀ, 0]]·[x; λ] = [rhs; 0], F = B + dI already factored,
/// via the Schur complement: x = F⁻¹rhs − G·S⁻¹·Ûᵀ(F⁻¹rhs).
pub struct SaddleSolver {
    factor: BandedFactor,
    basis: DMatrix<f64>,
    g: DMatrix<f64>,
    s_solver: SchurFactor,
}

impl SaddleSolver {
    pub fn new(factor: BandedFactor, basis: DMatrix<f64>) -> Result<Self> {
        let (g, s_solver) = schur_pieces(&factor, &basis)?;
        Ok(Self { factor, basis, g, s_solver })
    }

    /// X block of the saddle solution for the given right-hand sides.
    /// The result satisfies ÛᵀX = 0 and (B + dI)X ≡ rhs modulo span(Û).
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.factor.solve(rhs);
        let w = self.s_solver.solve(&(self.basis.transpose() * &y));
        y - &self.g * w
    }
}

/// One-shot saddle-point solve; see [`SaddleSolver`]. `factor` must hold
/// the already shifted operator B + dI.
pub fn solve_saddle(
    factor: &BandedFactor,
    basis: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (g, s_solver) = schur_pieces(factor, basis)?;
    let y = factor.solve(rhs);
    let w = s_solver.solve(&(basis.transpose() * &y));
    Ok(y - g * w)
}

/// Cached per-column data for one side of the operator.
struct SideContext {
    /// Columns are the eigenvectors of the r×r restriction of this side's
    /// operator; rotates tangent data into the diagonal frame.
    rotation: DMatrix<f64>,
    /// Op·basis in the rotated frame (BÛ on the left, CV̂ on the right).
    op_basis: DMatrix<f64>,
    /// Saddle solvers, one per shift taken from the opposite side.
    solvers: Vec<SaddleSolver>,
    /// Zᵢ = 𝒯ᵢ⁻¹(op_basis), cached for assembly and recovery.
    z: Vec<DMatrix<f64>>,
}

/// Builds the saddle solvers and Z caches for one side: `op` shifted by
/// each entry of `shifts`, constrained against the rotated `basis`.
fn build_side(
    op: &BandedMatrix,
    basis: DMatrix<f64>,
    rotation: DMatrix<f64>,
    shifts: &DVector<f64>,
) -> Result<SideContext> {
    let op_basis = op.mul_dense(&basis);
    let mut solvers = Vec::with_capacity(shifts.len());
    let mut z = Vec::with_capacity(shifts.len());
    for &shift in shifts.iter() {
        let shifted = op.add_scaled_identity(shift);
        let threshold = 1e-14 * op.max_abs().max(shift.abs());
        let factor = BandedFactor::with_threshold(&shifted, threshold)?;
        let solver = SaddleSolver::new(factor, basis.clone())?;
        z.push(solver.solve(&op_basis));
        solvers.push(solver);
    }
    Ok(SideContext { rotation, op_basis, solvers, z })
}

/// Eigendecomposition of the symmetrized restriction Wᵀ·Op·W; returns
/// (eigenvector matrix, eigenvalues) in matching column order.
fn restricted_eigen(op: &BandedMatrix, w: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let t = w.transpose() * op.mul_dense(w);
    let t = (&t + t.transpose()) * 0.5;
    let eig = t.symmetric_eigen();
    (eig.eigenvectors, eig.eigenvalues)
}

/// Prebuilt inverse of H_X at one anchor. Immutable after construction;
/// `apply` is safe to call concurrently.
pub struct PrecondContext {
    anchor: Anchor,
    left: SideContext,
    right: SideContext,
    kk_lu: nalgebra::LU<f64, Dyn, Dyn>,
    saddle_calls: AtomicU64,
    saddle_cols: AtomicU64,
}

/// Builds the preconditioner context at `anchor` for `op`.
///
/// Cost: 2r saddle-point factorizations, 2r saddle solves with r
/// right-hand sides each (each later `apply` adds one more right-hand
/// side per factorization), and one dense r²×r² factorization.
pub fn build_context(
    op: &SylvesterOperator,
    anchor: &Anchor,
    rank_cap: usize,
) -> Result<PrecondContext> {
    let r = anchor.rank();
    if r > rank_cap {
        return Err(Error::RankBudget { needed: r, budget: rank_cap });
    }
    if op.b.n() != anchor.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "left operator size {} does not match point rows {}",
            op.b.n(),
            anchor.nrows()
        )));
    }
    if let Some(c) = &op.c {
        if c.n() != anchor.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "right operator size {} does not match point columns {}",
                c.n(),
                anchor.ncols()
            )));
        }
    }
    let b_eff = op.b.scale(op.scale);
    let c_eff = match &op.c {
        Some(c) => c.scale(op.scale),
        None => BandedMatrix::zeros(anchor.ncols()),
    };

    // Diagonalize the r×r restrictions ÛᵀBÛ = D and V̂ᵀCV̂ = D̃.
    let (p, d) = restricted_eigen(&b_eff, anchor.u());
    let (pt, dt) = restricted_eigen(&c_eff, anchor.v());
    let u_hat = anchor.u() * &p;
    let v_hat = anchor.v() * &pt;

    // Left systems are shifted by the right-side eigenvalues and vice
    // versa: column i of Up couples to d̃ᵢ through ξ·C, and column i of
    // Vp couples to dᵢ through B·ξ.
    let left = build_side(&b_eff, u_hat, p, &dt)?;
    let right = build_side(&c_eff, v_hat, pt, &d)?;

    // Coupled r²×r² system on vec(M̂): blkdiag(Kᵢ) + Π·blkdiag(K̃ₐ)·Π
    // with Kᵢ = d̃ᵢI − (BÛ)ᵀZᵢ and K̃ₐ = dₐI − (CV̂)ᵀZ̃ₐ. The conjugated
    // term lands at [a + i·r, a + b·r] += K̃ₐ[i, b].
    let rr = r * r;
    let mut kk = DMatrix::zeros(rr, rr);
    for i in 0..r {
        let ki =
            DMatrix::from_diagonal_element(r, r, dt[i]) - left.op_basis.transpose() * &left.z[i];
        kk.view_mut((i * r, i * r), (r, r)).copy_from(&ki);
    }
    for a in 0..r {
        let kta =
            DMatrix::from_diagonal_element(r, r, d[a]) - right.op_basis.transpose() * &right.z[a];
        for i in 0..r {
            for b in 0..r {
                kk[(a + i * r, a + b * r)] += kta[(i, b)];
            }
        }
    }
    let kk_lu = kk.lu();
    let diag = kk_lu.u().diagonal();
    let mut dmin = f64::INFINITY;
    let mut dmax = 0.0f64;
    for &v in diag.iter() {
        dmin = dmin.min(v.abs());
        dmax = dmax.max(v.abs());
    }
    let cond = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::IllConditioned { cond });
    }

    let ctx = PrecondContext {
        anchor: anchor.clone(),
        left,
        right,
        kk_lu,
        saddle_calls: AtomicU64::new(0),
        saddle_cols: AtomicU64::new(0),
    };
    // Surface a broken inverse early: the preconditioner must be
    // self-adjoint in the tangent metric to be admissible inside tCG.
    #[cfg(debug_assertions)]
    ctx.debug_check_self_adjoint()?;

    // Build accounting: one saddle solve with r right-hand sides per
    // factorization (the Zᵢ), on both sides.
    ctx.saddle_calls.store(2 * r as u64, Ordering::Relaxed);
    ctx.saddle_cols.store(2 * (r * r) as u64, Ordering::Relaxed);
    Ok(ctx)
}

impl PrecondContext {
    pub fn anchor(&self) -> &Anchor {
        &self.anchor
    }

    /// Number of saddle-point solve invocations so far (build + applies).
    pub fn saddle_solve_calls(&self) -> u64 {
        self.saddle_calls.load(Ordering::Relaxed)
    }

    /// Total right-hand-side columns pushed through saddle-point solves.
    pub fn saddle_rhs_columns(&self) -> u64 {
        self.saddle_cols.load(Ordering::Relaxed)
    }

    /// Applies the inverse: returns ξ with P_X(c(Bξ + ξC)) = η.
    pub fn apply(&self, eta: &TangentVector) -> Result<TangentVector> {
        self.apply_inner(eta, true)
    }

    fn apply_inner(&self, eta: &TangentVector, count: bool) -> Result<TangentVector> {
        if !Arc::ptr_eq(&self.anchor, eta.anchor())
            && (self.anchor.u() != eta.anchor().u()
                || self.anchor.sigma() != eta.anchor().sigma()
                || self.anchor.v() != eta.anchor().v())
        {
            return Err(Error::AnchorMismatch);
        }
        let r = self.anchor.rank();
        let p = &self.left.rotation;
        let pt = &self.right.rotation;

        // Rotate into the frame where both restrictions are diagonal.
        let m_hat = p.transpose() * eta.m() * pt;
        let up_hat = eta.up() * pt;
        let vp_hat = eta.vp() * p;

        // Per-column saddle solves for the carried Up/Vp data.
        let mut t_left = DMatrix::zeros(up_hat.nrows(), r);
        let mut t_right = DMatrix::zeros(vp_hat.nrows(), r);
        for i in 0..r {
            let rhs = up_hat.columns(i, 1).into_owned();
            t_left.column_mut(i).copy_from(&self.left.solvers[i].solve(&rhs));
            let rhs = vp_hat.columns(i, 1).into_owned();
            t_right.column_mut(i).copy_from(&self.right.solvers[i].solve(&rhs));
        }
        if count {
            self.saddle_calls.fetch_add(2 * r as u64, Ordering::Relaxed);
            self.saddle_cols.fetch_add(2 * r as u64, Ordering::Relaxed);
        }

        // Coupled system right-hand side R = M̂_η − V − Ṽᵀ with
        // V = (BÛ)ᵀ[t₁ … t_r] and Ṽ = (CV̂)ᵀ[t̃₁ … t̃_r].
        let v_mat = self.left.op_basis.transpose() * &t_left;
        let vt_mat = self.right.op_basis.transpose() * &t_right;
        let rmat = m_hat - v_mat - vt_mat.transpose();
        let rvec = DVector::from_column_slice(rmat.as_slice());
        let mvec = self
            .kk_lu
            .solve(&rvec)
            .ok_or_else(|| Error::Solver("coupled core system solve failed".into()))?;
        let m_xi = DMatrix::from_column_slice(r, r, mvec.as_slice());

        // Recover the orthogonal blocks:
        // Ûp(:,i) = tᵢ − Zᵢ·M̂(:,i), V̂p(:,i) = t̃ᵢ − Z̃ᵢ·M̂ᵀ(:,i).
        let m_xi_t = m_xi.transpose();
        let mut up_xi = t_left;
        let mut vp_xi = t_right;
        for i in 0..r {
            let zc = &self.left.z[i] * m_xi.columns(i, 1);
            up_xi.column_mut(i).axpy(-1.0, &zc.column(0), 1.0);
            let zc = &self.right.z[i] * m_xi_t.columns(i, 1);
            vp_xi.column_mut(i).axpy(-1.0, &zc.column(0), 1.0);
        }

        // Rotate back to the anchor frame.
        let m_out = p * m_xi * pt.transpose();
        let up_out = up_xi * pt.transpose();
        let vp_out = vp_xi * p.transpose();
        Ok(TangentVector::from_gauged(self.anchor.clone(), m_out, up_out, vp_out))
    }

    #[cfg(debug_assertions)]
    fn debug_check_self_adjoint(&self) -> Result<()> {
        let xi = random_tangent(&self.anchor, 0x5e1f);
        let zeta = random_tangent(&self.anchor, 0xad10);
        let pxi = self.apply_inner(&xi, false)?;
        let pzeta = self.apply_inner(&zeta, false)?;
        let lhs = pxi.inner(&zeta)?;
        let rhs = xi.inner(&pzeta)?;
        let scale = pxi.norm() + pzeta.norm() + 1.0;
        debug_assert!(
            (lhs - rhs).abs() <= 1e-10 * scale,
            "preconditioner is not self-adjoint: {lhs} vs {rhs}"
        );
        Ok(())
    }
}
