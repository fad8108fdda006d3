//! Geometry of the manifold of rank-r matrices: points in SVD form,
//! tangent vectors in the (M, Up, Vp) parametrization, the Euclidean
//! metric, tangent-space projection, and the truncated-SVD retraction.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::factored::{Core, FactoredMatrix};

/// Rank-r matrix X = U·diag(σ)·Vᵀ with orthonormal U (m×r), V (n×r) and
/// positive nonincreasing singular values.
#[derive(Debug, Clone)]
pub struct FixedRankPoint {
    u: DMatrix<f64>,
    sigma: DVector<f64>,
    v: DMatrix<f64>,
}

/// Shared handle to a base point; tangent vectors hold one so anchor
/// identity is cheap to check.
pub type Anchor = Arc<FixedRankPoint>;

impl FixedRankPoint {
    pub fn new(u: DMatrix<f64>, sigma: DVector<f64>, v: DMatrix<f64>) -> Result<Self> {
        let r = sigma.len();
        if u.ncols() != r || v.ncols() != r {
            return Err(Error::ShapeMismatch(format!(
                "factor column counts ({}, {}) do not match rank {r}",
                u.ncols(),
                v.ncols()
            )));
        }
        if r == 0 || r > u.nrows().min(v.nrows()) {
            return Err(Error::InvalidArgument(format!(
                "rank {r} out of range for a {}x{} matrix",
                u.nrows(),
                v.nrows()
            )));
        }
        let point = Self { u, sigma, v };
        point.check_invariants()?;
        Ok(point)
    }

    fn check_invariants(&self) -> Result<()> {
        let r = self.rank();
        for i in 0..r {
            if !(self.sigma[i] > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "singular value {i} is {} (must be positive)",
                    self.sigma[i]
                )));
            }
            if i > 0 && self.sigma[i] > self.sigma[i - 1] {
                return Err(Error::InvalidArgument("singular values must be nonincreasing".into()));
            }
        }
        let tol = 1e-12;
        let eye = DMatrix::identity(r, r);
        let du = (self.u.transpose() * &self.u - &eye).amax();
        let dv = (self.v.transpose() * &self.v - &eye).amax();
        if du > tol || dv > tol {
            return Err(Error::InvalidArgument(format!(
                "factors are not orthonormal (deviations {du:.3e}, {dv:.3e})"
            )));
        }
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.u.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.v.nrows()
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Dimension of the rank-r manifold at this point: (m + n - r)·r.
    pub fn manifold_dim(&self) -> usize {
        (self.nrows() + self.ncols() - self.rank()) * self.rank()
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn to_factored(&self) -> FactoredMatrix {
        FactoredMatrix::from_diag(self.u.clone(), self.sigma.clone(), self.v.clone())
            .expect("point factors are conformal")
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.to_factored().to_dense()
    }

    pub fn fro_norm(&self) -> f64 {
        self.sigma.norm()
    }

    /// Keeps the leading `rank` singular triplets.
    pub fn truncate(&self, rank: usize) -> Result<Self> {
        if rank == 0 || rank > self.rank() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate rank-{} point to rank {rank}",
                self.rank()
            )));
        }
        Self::new(
            self.u.columns(0, rank).into_owned(),
            self.sigma.rows(0, rank).into_owned(),
            self.v.columns(0, rank).into_owned(),
        )
    }
}

/// Tangent vector at an anchor point, parametrized as
/// ξ = U·M·Vᵀ + Up·Vᵀ + U·Vpᵀ with gauge conditions UᵀUp = 0, VᵀVp = 0.
#[derive(Debug, Clone)]
pub struct TangentVector {
    anchor: Anchor,
    m: DMatrix<f64>,
    up: DMatrix<f64>,
    vp: DMatrix<f64>,
}

impl TangentVector {
    /// Wraps raw components, enforcing the gauge conditions by projecting
    /// Up and Vp onto the orthogonal complements of U and V.
    pub fn new(
        anchor: Anchor,
        m: DMatrix<f64>,
        up: DMatrix<f64>,
        vp: DMatrix<f64>,
    ) -> Result<Self> {
        let r = anchor.rank();
        if m.nrows() != r
            || m.ncols() != r
            || up.nrows() != anchor.nrows()
            || up.ncols() != r
            || vp.nrows() != anchor.ncols()
            || vp.ncols() != r
        {
            return Err(Error::ShapeMismatch(
                "tangent components do not match the anchor's shape".into(),
            ));
        }
        let up = &up - anchor.u() * (anchor.u().transpose() * &up);
        let vp = &vp - anchor.v() * (anchor.v().transpose() * &vp);
        Ok(Self { anchor, m, up, vp })
    }

    /// Wraps components that already satisfy the gauge conditions.
    pub(crate) fn from_gauged(
        anchor: Anchor,
        m: DMatrix<f64>,
        up: DMatrix<f64>,
        vp: DMatrix<f64>,
    ) -> Self {
        debug_assert!((anchor.u().transpose() * &up).amax() <= 1e-10 * (1.0 + up.amax()));
        debug_assert!((anchor.v().transpose() * &vp).amax() <= 1e-10 * (1.0 + vp.amax()));
        Self { anchor, m, up, vp }
    }

    pub fn zero(anchor: Anchor) -> Self {
        let r = anchor.rank();
        let (m, n) = (anchor.nrows(), anchor.ncols());
        Self { m: DMatrix::zeros(r, r), up: DMatrix::zeros(m, r), vp: DMatrix::zeros(n, r), anchor }
    }

    pub fn anchor(&self) -> &Anchor {
        &self.anchor
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn up(&self) -> &DMatrix<f64> {
        &self.up
    }

    pub fn vp(&self) -> &DMatrix<f64> {
        &self.vp
    }

    fn same_anchor(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.anchor, &other.anchor)
            || (self.anchor.u() == other.anchor.u()
                && self.anchor.sigma() == other.anchor.sigma()
                && self.anchor.v() == other.anchor.v())
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { anchor: self.anchor.clone(), m: &self.m * c, up: &self.up * c, vp: &self.vp * c }
    }

    /// self + c·other; both vectors must share the anchor.
    pub fn add_scaled(&self, other: &Self, c: f64) -> Result<Self> {
        if !self.same_anchor(other) {
            return Err(Error::AnchorMismatch);
        }
        Ok(Self {
            anchor: self.anchor.clone(),
            m: &self.m + c * &other.m,
            up: &self.up + c * &other.up,
            vp: &self.vp + c * &other.vp,
        })
    }

    /// Riemannian metric: trace(M₁ᵀM₂) + trace(Up₁ᵀUp₂) + trace(Vp₁ᵀVp₂).
    /// Equals the ambient Frobenius inner product because the gauge
    /// conditions kill all cross terms.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        if !self.same_anchor(other) {
            return Err(Error::AnchorMismatch);
        }
        Ok(self.m.dot(&other.m) + self.up.dot(&other.up) + self.vp.dot(&other.vp))
    }

    pub fn norm(&self) -> f64 {
        (self.m.norm_squared() + self.up.norm_squared() + self.vp.norm_squared()).sqrt()
    }

    /// Factored form [U, Up]·[[M, I],[I, 0]]·[V, Vp]ᵀ of inner dimension 2r.
    pub fn to_factored(&self) -> FactoredMatrix {
        let anchor = &self.anchor;
        let r = anchor.rank();
        let mut u = DMatrix::zeros(anchor.nrows(), 2 * r);
        u.columns_mut(0, r).copy_from(anchor.u());
        u.columns_mut(r, r).copy_from(&self.up);
        let mut v = DMatrix::zeros(anchor.ncols(), 2 * r);
        v.columns_mut(0, r).copy_from(anchor.v());
        v.columns_mut(r, r).copy_from(&self.vp);
        let mut core = DMatrix::zeros(2 * r, 2 * r);
        core.view_mut((0, 0), (r, r)).copy_from(&self.m);
        core.view_mut((0, r), (r, r)).fill_with_identity();
        core.view_mut((r, 0), (r, r)).fill_with_identity();
        FactoredMatrix::new(u, Core::Dense(core), v).expect("tangent factors are conformal")
    }

    /// Factored form with orthonormal factors and a diagonal core (an SVD
    /// of the tangent vector viewed as an ambient matrix). Zero singular
    /// values are kept so the inner dimension stays deterministic only in
    /// the nonzero count; callers needing a fixed size should not rely on it.
    pub fn to_svd_factored(&self) -> FactoredMatrix {
        self.to_factored().recompress(0.0).expect("tangent recompression cannot fail")
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.to_factored().to_dense()
    }
}

/// Projects an ambient factored matrix Z onto the tangent space at X:
/// M = Uᵀ(ZV), Up = ZV - UM, Vp = ZᵀU - VMᵀ. Cost O((m+n)·r·k) for Z of
/// inner dimension k; no dense m×n matrix is formed.
pub fn project(anchor: &Anchor, z: &FactoredMatrix) -> Result<TangentVector> {
    if z.nrows() != anchor.nrows() || z.ncols() != anchor.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "cannot project a {}x{} matrix at a {}x{} point",
            z.nrows(),
            z.ncols(),
            anchor.nrows(),
            anchor.ncols()
        )));
    }
    // ZV = Zu·S·(Zvᵀ·V) and ZᵀU assembled right-to-left.
    let zv = apply_factored(z, anchor.v(), false);
    let ztu = apply_factored(z, anchor.u(), true);
    Ok(project_from_products(anchor, zv, ztu))
}

/// Projection of a dense ambient matrix; used by the dense fallback paths.
pub fn project_dense(anchor: &Anchor, z: &DMatrix<f64>) -> Result<TangentVector> {
    if z.nrows() != anchor.nrows() || z.ncols() != anchor.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "cannot project a {}x{} matrix at a {}x{} point",
            z.nrows(),
            z.ncols(),
            anchor.nrows(),
            anchor.ncols()
        )));
    }
    let zv = z * anchor.v();
    let ztu = z.transpose() * anchor.u();
    Ok(project_from_products(anchor, zv, ztu))
}

fn project_from_products(anchor: &Anchor, zv: DMatrix<f64>, ztu: DMatrix<f64>) -> TangentVector {
    let m = anchor.u().transpose() * &zv;
    let up = zv - anchor.u() * &m;
    let vp = ztu - anchor.v() * m.transpose();
    TangentVector::from_gauged(anchor.clone(), m, up, vp)
}

/// Z·Y or Zᵀ·Y for factored Z without densifying.
fn apply_factored(z: &FactoredMatrix, y: &DMatrix<f64>, transpose: bool) -> DMatrix<f64> {
    let (a, b) = if transpose { (z.v(), z.u()) } else { (z.u(), z.v()) };
    let by = b.transpose() * y;
    let sby = match z.core() {
        Core::Diag(s) => {
            let mut out = by;
            for (i, &si) in s.iter().enumerate() {
                out.row_mut(i).scale_mut(si);
            }
            out
        }
        Core::Dense(s) => {
            if transpose {
                s.transpose() * by
            } else {
                s * by
            }
        }
    };
    a * sby
}

/// Metric-projection retraction: the rank-r truncated SVD of X + ξ,
/// computed from QR factors of [U, Up] and [V, Vp] and an SVD of the
/// resulting 2r×2r core.
pub fn retract(anchor: &Anchor, xi: &TangentVector) -> Result<FixedRankPoint> {
    if !Arc::ptr_eq(anchor, xi.anchor())
        && (anchor.u() != xi.anchor().u()
            || anchor.sigma() != xi.anchor().sigma()
            || anchor.v() != xi.anchor().v())
    {
        return Err(Error::AnchorMismatch);
    }
    let r = anchor.rank();
    // X + ξ = [U, Up]·[[Σ + M, I],[I, 0]]·[V, Vp]ᵀ.
    let mut lu = DMatrix::zeros(anchor.nrows(), 2 * r);
    lu.columns_mut(0, r).copy_from(anchor.u());
    lu.columns_mut(r, r).copy_from(xi.up());
    let mut rv = DMatrix::zeros(anchor.ncols(), 2 * r);
    rv.columns_mut(0, r).copy_from(anchor.v());
    rv.columns_mut(r, r).copy_from(xi.vp());
    let mut core = DMatrix::zeros(2 * r, 2 * r);
    core.view_mut((0, 0), (r, r)).copy_from(&(DMatrix::from_diagonal(anchor.sigma()) + xi.m()));
    core.view_mut((0, r), (r, r)).fill_with_identity();
    core.view_mut((r, 0), (r, r)).fill_with_identity();

    let qu = lu.qr();
    let qv = rv.qr();
    let small = qu.r() * core * qv.r().transpose();
    let svd = small.svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    // A result at roundoff scale of the inputs is a full collapse; its
    // singular values are noise and their ratio is meaningless.
    let input_scale = anchor.sigma()[0] + xi.norm();
    if smax <= 1e-14 * input_scale {
        return Err(Error::RankDeficient {
            ratio: if input_scale > 0.0 { smax / input_scale } else { 0.0 },
        });
    }
    let u_small = svd.u.as_ref().expect("svd requested u");
    let vt_small = svd.v_t.as_ref().expect("svd requested v_t");
    let u = qu.q() * u_small.columns(0, r);
    let v = qv.q() * vt_small.rows(0, r).transpose();
    // Trailing singular values may collapse when the iterate is
    // effectively lower rank; clamp them to a relative floor so the
    // point stays on the rank-r stratum. The SVD factors remain
    // orthonormal, and the clamped tail sits below every truncation
    // tolerance downstream.
    let floor = 1e-14 * smax;
    let sigma = DVector::from_fn(r, |i, _| sv[i].max(floor));
    FixedRankPoint::new(u, sigma, v)
}

/// Deterministic random rank-r point: orthonormal factors from QR of
/// Gaussian matrices, singular values uniform in [0.5, 2] sorted
/// descending.
pub fn random_point(m: usize, n: usize, r: usize, seed: u64) -> Result<Anchor> {
    if r == 0 || r > m.min(n) {
        return Err(Error::InvalidArgument(format!("rank {r} out of range for a {m}x{n} matrix")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_orthonormal(&mut rng, m, r);
    let v = random_orthonormal(&mut rng, n, r);
    let mut vals: Vec<f64> = (0..r).map(|_| rng.gen_range(0.5..2.0)).collect();
    vals.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(Arc::new(FixedRankPoint::new(u, DVector::from_vec(vals), v)?))
}

/// Deterministic random tangent vector at X with unit norm.
pub fn random_tangent(anchor: &Anchor, seed: u64) -> TangentVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = anchor.rank();
    let m = DMatrix::from_fn(r, r, |_, _| rng.gen_range(-1.0..1.0));
    let up = DMatrix::from_fn(anchor.nrows(), r, |_, _| rng.gen_range(-1.0..1.0));
    let vp = DMatrix::from_fn(anchor.ncols(), r, |_, _| rng.gen_range(-1.0..1.0));
    let xi = TangentVector::new(anchor.clone(), m, up, vp).expect("components are conformal");
    let norm = xi.norm();
    if norm > 0.0 {
        xi.scale(1.0 / norm)
    } else {
        xi
    }
}

/// Orthonormal m×r factor from the QR of a Gaussian sample.
pub(crate) fn random_orthonormal<R: Rng>(rng: &mut R, m: usize, r: usize) -> DMatrix<f64> {
    use rand_distr::StandardNormal;
    let g = DMatrix::from_fn(m, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    qr.q()
}
