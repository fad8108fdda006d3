//! Low-rank factored matrices X = U·S·Vᵀ and the Hadamard (entrywise)
//! product algebra on them.
//!
//! Factors are not required to be orthonormal and the inner dimension is
//! not required to be minimal. Hadamard operations multiply inner
//! dimensions and never truncate; compression is an explicit separate step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Core of a factored matrix: diagonal (stored as a vector) or dense.
#[derive(Debug, Clone)]
pub enum Core {
    Diag(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl Core {
    pub fn dim(&self) -> usize {
        match self {
            Core::Diag(s) => s.len(),
            Core::Dense(s) => s.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Core::Diag(s) => DMatrix::from_diagonal(s),
            Core::Dense(s) => s.clone(),
        }
    }

    pub fn scale(&self, c: f64) -> Core {
        match self {
            Core::Diag(s) => Core::Diag(s * c),
            Core::Dense(s) => Core::Dense(s * c),
        }
    }

    /// M·S for dense M with k columns.
    fn mul_left(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Core::Diag(s) => {
                let mut out = m.clone();
                for (j, &sj) in s.iter().enumerate() {
                    out.column_mut(j).scale_mut(sj);
                }
                out
            }
            Core::Dense(s) => m * s,
        }
    }
}

/// Matrix in factored form U·S·Vᵀ with U: m×k, S: k×k, V: n×k.
#[derive(Debug, Clone)]
pub struct FactoredMatrix {
    u: DMatrix<f64>,
    core: Core,
    v: DMatrix<f64>,
}

impl FactoredMatrix {
    pub fn new(u: DMatrix<f64>, core: Core, v: DMatrix<f64>) -> Result<Self> {
        let k = core.dim();
        if let Core::Dense(s) = &core {
            if s.nrows() != s.ncols() {
                return Err(Error::ShapeMismatch(format!(
                    "core must be square, got {}x{}",
                    s.nrows(),
                    s.ncols()
                )));
            }
        }
        if u.ncols() != k || v.ncols() != k {
            return Err(Error::ShapeMismatch(format!(
                "factor column counts ({}, {}) do not match core dimension {k}",
                u.ncols(),
                v.ncols()
            )));
        }
        Ok(Self { u, core, v })
    }

    pub fn from_diag(u: DMatrix<f64>, s: DVector<f64>, v: DMatrix<f64>) -> Result<Self> {
        Self::new(u, Core::Diag(s), v)
    }

    /// The m×n zero matrix as an empty factorization (inner dimension 0).
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            u: DMatrix::zeros(m, 0),
            core: Core::Diag(DVector::zeros(0)),
            v: DMatrix::zeros(n, 0),
        }
    }

    pub fn nrows(&self) -> usize {
        self.u.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.v.nrows()
    }

    pub fn inner_dim(&self) -> usize {
        self.core.dim()
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn core(&self) -> &Core {
        &self.core
    }

    /// Diagonal core entries; error when the core is dense.
    pub fn diag(&self) -> Result<&DVector<f64>> {
        match &self.core {
            Core::Diag(s) => Ok(s),
            Core::Dense(_) => {
                Err(Error::InvalidArgument("operation requires a diagonal core".into()))
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.core.mul_left(&self.u) * self.v.transpose()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { u: self.u.clone(), core: self.core.scale(c), v: self.v.clone() }
    }

    pub fn transpose(&self) -> Self {
        let core = match &self.core {
            Core::Diag(s) => Core::Diag(s.clone()),
            Core::Dense(s) => Core::Dense(s.transpose()),
        };
        Self { u: self.v.clone(), core, v: self.u.clone() }
    }

    /// Sum of two factored matrices by factor concatenation; inner
    /// dimensions add. Cores stay diagonal when both operands are diagonal.
    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::sum(&[self.clone(), other.clone()])
    }

    /// Sum of factored matrices by factor concatenation.
    pub fn sum(parts: &[Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidArgument("sum of zero factored matrices".into()));
        };
        let (m, n) = (first.nrows(), first.ncols());
        for p in parts {
            if p.nrows() != m || p.ncols() != n {
                return Err(Error::ShapeMismatch(format!(
                    "sum operand is {}x{}, expected {m}x{n}",
                    p.nrows(),
                    p.ncols()
                )));
            }
        }
        let k: usize = parts.iter().map(Self::inner_dim).sum();
        let mut u = DMatrix::zeros(m, k);
        let mut v = DMatrix::zeros(n, k);
        let all_diag = parts.iter().all(|p| matches!(p.core, Core::Diag(_)));
        let mut offset = 0;
        for p in parts {
            let kp = p.inner_dim();
            u.columns_mut(offset, kp).copy_from(&p.u);
            v.columns_mut(offset, kp).copy_from(&p.v);
            offset += kp;
        }
        let core = if all_diag {
            let mut s = DVector::zeros(k);
            let mut offset = 0;
            for p in parts {
                if let Core::Diag(sp) = &p.core {
                    s.rows_mut(offset, sp.len()).copy_from(sp);
                    offset += sp.len();
                }
            }
            Core::Diag(s)
        } else {
            let mut s = DMatrix::zeros(k, k);
            let mut offset = 0;
            for p in parts {
                let kp = p.inner_dim();
                s.view_mut((offset, offset), (kp, kp)).copy_from(&p.core.to_dense());
                offset += kp;
            }
            Core::Dense(s)
        };
        Self::new(u, core, v)
    }

    /// Entrywise square; factors expand by the transposed Khatri-Rao
    /// product and the diagonal core by the Kronecker square.
    pub fn hadamard_square(&self) -> Result<Self> {
        self.hadamard_product(self)
    }

    /// Entrywise product of two factored matrices with diagonal cores.
    /// Inner dimension is the product of the operand inner dimensions.
    pub fn hadamard_product(&self, other: &Self) -> Result<Self> {
        if self.nrows() != other.nrows() || self.ncols() != other.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "hadamard operands are {}x{} and {}x{}",
                self.nrows(),
                self.ncols(),
                other.nrows(),
                other.ncols()
            )));
        }
        let sa = self.diag()?;
        let sb = other.diag()?;
        let u = khatri_rao_t(&self.u, &other.u)?;
        let v = khatri_rao_t(&self.v, &other.v)?;
        let s = kron_diag(sa, sb);
        Self::new(u, Core::Diag(s), v)
    }

    /// tr(selfᵀ·other), the Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.nrows() != other.nrows() || self.ncols() != other.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "dot operands are {}x{} and {}x{}",
                self.nrows(),
                self.ncols(),
                other.nrows(),
                other.ncols()
            )));
        }
        // tr(S1ᵀ·(U1ᵀU2)·S2·(V2ᵀV1)) via small k1×k2 intermediates.
        let p = self.u.transpose() * &other.u;
        let q = other.v.transpose() * &self.v;
        let ps2 = other.core.mul_left(&p);
        let n = ps2 * q;
        let s1 = self.core.to_dense();
        Ok(s1.iter().zip(n.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn fro_norm(&self) -> f64 {
        self.dot(self).expect("self-dot cannot mismatch").max(0.0).sqrt()
    }

    /// Sum of all entries: (1ᵀU)·S·(Vᵀ1).
    pub fn sum_entries(&self) -> f64 {
        let ones_u = DVector::from_element(self.nrows(), 1.0);
        let ones_v = DVector::from_element(self.ncols(), 1.0);
        let ut_ones = self.u.transpose() * ones_u;
        let left = DMatrix::from_fn(1, self.inner_dim(), |_, j| ut_ones[j]);
        let right = self.v.transpose() * ones_v;
        (self.core.mul_left(&left) * right)[(0, 0)]
    }

    /// Compresses to an SVD-form factorization (orthonormal factors,
    /// nonincreasing diagonal core), discarding singular values at or
    /// below rel_tol times the largest.
    pub fn recompress(&self, rel_tol: f64) -> Result<Self> {
        if self.inner_dim() == 0 {
            return Ok(self.clone());
        }
        let qu = self.u.clone().qr();
        let qv = self.v.clone().qr();
        // S·Rvᵀ without densifying a diagonal core.
        let s_rvt = match &self.core {
            Core::Diag(_) => self.core.mul_left(&qv.r()).transpose(),
            Core::Dense(s) => s * qv.r().transpose(),
        };
        let small = qu.r() * s_rvt;
        let svd = small.svd(true, true);
        let u_small = svd.u.as_ref().expect("svd requested u");
        let vt_small = svd.v_t.as_ref().expect("svd requested v_t");
        let smax = svd.singular_values.max();
        let rank =
            svd.singular_values.iter().take_while(|&&s| s > rel_tol * smax && s > 0.0).count();
        let u = qu.q() * u_small.columns(0, rank);
        let v = qv.q() * vt_small.rows(0, rank).transpose();
        let s = DVector::from_fn(rank, |i, _| svd.singular_values[i]);
        Self::new(u, Core::Diag(s), v)
    }
}

/// Transposed Khatri-Rao product: row i of the output is the Kronecker
/// product of row i of `a` with row i of `b`. Output column p·kb + q holds
/// a.column(p) ⊙ b.column(q).
pub fn khatri_rao_t(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "khatri_rao_t row counts {} and {} differ",
            a.nrows(),
            b.nrows()
        )));
    }
    let (n, ka, kb) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(n, ka * kb);
    for p in 0..ka {
        for q in 0..kb {
            let mut col = out.column_mut(p * kb + q);
            for i in 0..n {
                col[i] = a[(i, p)] * b[(i, q)];
            }
        }
    }
    Ok(out)
}

/// Kronecker product of two diagonals, ordered to match [`khatri_rao_t`]:
/// entry p·kb + q is sa[p]·sb[q].
pub fn kron_diag(sa: &DVector<f64>, sb: &DVector<f64>) -> DVector<f64> {
    let (ka, kb) = (sa.len(), sb.len());
    DVector::from_fn(ka * kb, |c, _| sa[c / kb] * sb[c % kb])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_factored(m: usize, n: usize, k: usize, seed: u64) -> FactoredMatrix {
        let mut rng = StdRng::seed_from_u64(seed);
        let u = DMatrix::from_fn(m, k, |_, _| rng.gen_range(-1.0..1.0));
        let v = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
        let s = DVector::from_fn(k, |_, _| rng.gen_range(0.1..2.0));
        FactoredMatrix::from_diag(u, s, v).unwrap()
    }

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()))
    }

    #[test]
    fn khatri_rao_single_row_is_kronecker() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let out = khatri_rao_t(&a, &b).unwrap();
        assert_eq!(out, DMatrix::from_row_slice(1, 4, &[3.0, 4.0, 6.0, 8.0]));
    }

    #[test]
    fn khatri_rao_with_ones_column_is_identity() {
        let ones = DMatrix::from_element(7, 1, 1.0);
        let b = DMatrix::from_fn(7, 3, |i, j| (i * 3 + j) as f64 - 5.0);
        assert_eq!(khatri_rao_t(&ones, &b).unwrap(), b);
    }

    #[test]
    fn khatri_rao_entries_match_rowwise_kronecker() {
        let a = DMatrix::from_fn(5, 2, |i, j| (i + 2 * j) as f64 * 0.3 - 1.0);
        let b = DMatrix::from_fn(5, 3, |i, j| (2 * i + j) as f64 * 0.2 - 0.7);
        let out = khatri_rao_t(&a, &b).unwrap();
        for i in 0..5 {
            for p in 0..2 {
                for q in 0..3 {
                    assert_eq!(out[(i, p * 3 + q)], a[(i, p)] * b[(i, q)]);
                }
            }
        }
    }

    #[test]
    fn khatri_rao_rejects_row_mismatch() {
        let a = DMatrix::zeros(4, 2);
        let b = DMatrix::zeros(5, 2);
        assert!(khatri_rao_t(&a, &b).is_err());
    }

    #[test]
    fn hadamard_square_of_zero_is_zero() {
        let x = FactoredMatrix::zeros(4, 6);
        let sq = x.hadamard_square().unwrap();
        assert_eq!(sq.to_dense(), DMatrix::zeros(4, 6));
        assert_eq!(sq.inner_dim(), 0);
    }

    #[test]
    fn hadamard_square_of_constant_rank_one() {
        let c = -1.7;
        let x = FactoredMatrix::from_diag(
            DMatrix::from_element(3, 1, 1.0),
            DVector::from_element(1, c),
            DMatrix::from_element(5, 1, 1.0),
        )
        .unwrap();
        let sq = x.hadamard_square().unwrap();
        assert!(max_abs(&(sq.to_dense() - DMatrix::from_element(3, 5, c * c))) <= 1e-14);
    }

    #[test]
    fn hadamard_square_matches_dense_elementwise_square() {
        let x = random_factored(6, 5, 2, 11);
        let dense = x.to_dense();
        let oracle = dense.map(|v| v * v);
        let sq = x.hadamard_square().unwrap();
        assert_eq!(sq.inner_dim(), 4);
        let scale = max_abs(&dense).powi(2);
        assert!(max_abs(&(sq.to_dense() - oracle)) <= 1e-12 * scale);
    }

    #[test]
    fn hadamard_square_accuracy_over_sizes() {
        for (m, n, k, seed) in [(64, 64, 4, 1u64), (32, 64, 3, 2), (64, 17, 4, 3), (8, 8, 1, 4)] {
            let x = random_factored(m, n, k, seed);
            let dense = x.to_dense();
            let oracle = dense.map(|v| v * v);
            let err = max_abs(&(x.hadamard_square().unwrap().to_dense() - oracle));
            assert!(err <= 1e-12 * max_abs(&dense).powi(2), "({m},{n},{k}): err {err}");
        }
    }

    #[test]
    fn hadamard_product_with_ones_is_identity() {
        let x = random_factored(5, 4, 3, 21);
        let ones = FactoredMatrix::from_diag(
            DMatrix::from_element(5, 1, 1.0),
            DVector::from_element(1, 1.0),
            DMatrix::from_element(4, 1, 1.0),
        )
        .unwrap();
        let prod = x.hadamard_product(&ones).unwrap();
        assert!(max_abs(&(prod.to_dense() - x.to_dense())) <= 1e-13);
    }

    #[test]
    fn hadamard_product_of_equal_operands_is_square() {
        let x = random_factored(6, 7, 2, 31);
        let a = x.hadamard_product(&x).unwrap().to_dense();
        let b = x.hadamard_square().unwrap().to_dense();
        assert_eq!(a, b);
    }

    #[test]
    fn hadamard_product_matches_dense_oracle() {
        let x = random_factored(9, 6, 2, 41);
        let y = random_factored(9, 6, 3, 42);
        let oracle = x.to_dense().component_mul(&y.to_dense());
        let prod = x.hadamard_product(&y).unwrap();
        assert_eq!(prod.inner_dim(), 6);
        let scale = max_abs(&x.to_dense()) * max_abs(&y.to_dense());
        assert!(max_abs(&(prod.to_dense() - oracle)) <= 1e-12 * scale);
    }

    #[test]
    fn hadamard_requires_diagonal_core() {
        let x = FactoredMatrix::new(
            DMatrix::identity(4, 2),
            Core::Dense(DMatrix::identity(2, 2)),
            DMatrix::identity(4, 2),
        )
        .unwrap();
        assert!(x.hadamard_square().is_err());
    }

    #[test]
    fn hadamard_rejects_shape_mismatch() {
        let x = random_factored(4, 4, 2, 51);
        let y = random_factored(4, 5, 2, 52);
        assert!(x.hadamard_product(&y).is_err());
    }

    #[test]
    fn sum_matches_dense_addition() {
        let x = random_factored(6, 5, 2, 61);
        let y = random_factored(6, 5, 3, 62);
        let z = random_factored(6, 5, 1, 63);
        let total = FactoredMatrix::sum(&[x.clone(), y.clone(), z.clone()]).unwrap();
        assert_eq!(total.inner_dim(), 6);
        let oracle = x.to_dense() + y.to_dense() + z.to_dense();
        assert!(max_abs(&(total.to_dense() - oracle)) <= 1e-13);
    }

    #[test]
    fn sum_with_dense_core_promotes() {
        let x = random_factored(4, 4, 2, 71);
        let y = FactoredMatrix::new(
            DMatrix::from_fn(4, 2, |i, j| (i + j) as f64),
            Core::Dense(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, -1.0])),
            DMatrix::from_fn(4, 2, |i, j| (i as f64) - (j as f64)),
        )
        .unwrap();
        let total = x.add(&y).unwrap();
        let oracle = x.to_dense() + y.to_dense();
        assert!(max_abs(&(total.to_dense() - oracle)) <= 1e-12);
    }

    #[test]
    fn dot_and_norm_match_dense() {
        let x = random_factored(7, 5, 3, 81);
        let y = random_factored(7, 5, 2, 82);
        let oracle = (x.to_dense().transpose() * y.to_dense()).trace();
        assert!((x.dot(&y).unwrap() - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
        assert!((x.fro_norm() - x.to_dense().norm()).abs() <= 1e-12 * x.fro_norm());
    }

    #[test]
    fn sum_entries_matches_dense() {
        let x = random_factored(6, 9, 3, 91);
        let oracle: f64 = x.to_dense().iter().sum();
        assert!((x.sum_entries() - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    }

    #[test]
    fn scale_and_transpose_match_dense() {
        let x = random_factored(5, 7, 3, 101);
        assert!(max_abs(&(x.scale(-2.5).to_dense() - x.to_dense() * -2.5)) <= 1e-13);
        assert!(max_abs(&(x.transpose().to_dense() - x.to_dense().transpose())) <= 1e-13);
    }

    #[test]
    fn recompress_preserves_value_and_orthonormalizes() {
        let x = random_factored(10, 8, 3, 111);
        // Duplicate columns force a redundant inner dimension.
        let padded = x.add(&x.scale(0.5)).unwrap();
        assert_eq!(padded.inner_dim(), 6);
        let c = padded.recompress(1e-13).unwrap();
        assert!(c.inner_dim() <= 3);
        assert!(max_abs(&(c.to_dense() - padded.to_dense())) <= 1e-11);
        let u = c.u();
        let v = c.v();
        assert!(
            max_abs(&(u.transpose() * u - DMatrix::identity(c.inner_dim(), c.inner_dim())))
                <= 1e-12
        );
        assert!(
            max_abs(&(v.transpose() * v - DMatrix::identity(c.inner_dim(), c.inner_dim())))
                <= 1e-12
        );
        let s = c.diag().unwrap();
        for i in 1..s.len() {
            assert!(s[i] <= s[i - 1]);
        }
    }

    #[test]
    fn recompress_truncates_at_relative_tolerance() {
        // Orthogonal factors with known singular values 1, 0.1, 1e-9.
        let q = DMatrix::identity(6, 3);
        let s = DVector::from_vec(vec![1.0, 0.1, 1e-9]);
        let x = FactoredMatrix::from_diag(q.clone(), s, q).unwrap();
        let c = x.recompress(1e-6).unwrap();
        assert_eq!(c.inner_dim(), 2);
        let full = x.recompress(0.0).unwrap();
        assert_eq!(full.inner_dim(), 3);
    }

    proptest! {
        #[test]
        fn prop_khatri_rao_bilinear(seed in 0u64..300) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.gen_range(2usize..8);
            let (ka, kb) = (rng.gen_range(1usize..4), rng.gen_range(1usize..4));
            let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let mut mat = |k: usize| DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0f64));
            let (a1, a2, b) = (mat(ka), mat(ka), mat(kb));
            let lhs = khatri_rao_t(&(alpha * &a1 + beta * &a2), &b).unwrap();
            let rhs = alpha * khatri_rao_t(&a1, &b).unwrap() + beta * khatri_rao_t(&a2, &b).unwrap();
            prop_assert!(max_abs(&(lhs - rhs)) <= 1e-12);
            let (b1, b2, a) = (mat(kb), mat(kb), mat(ka));
            let lhs = khatri_rao_t(&a, &(alpha * &b1 + beta * &b2)).unwrap();
            let rhs = alpha * khatri_rao_t(&a, &b1).unwrap() + beta * khatri_rao_t(&a, &b2).unwrap();
            prop_assert!(max_abs(&(lhs - rhs)) <= 1e-12);
        }

        #[test]
        fn prop_hadamard_square_accuracy(
            m in 2usize..64,
            n in 2usize..64,
            k in 1usize..5,
            seed in 0u64..100,
        ) {
            let x = random_factored(m, n, k, seed);
            let dense = x.to_dense();
            let oracle = dense.map(|v| v * v);
            let err = max_abs(&(x.hadamard_square().unwrap().to_dense() - oracle));
            prop_assert!(err <= 1e-12 * (1.0 + max_abs(&dense).powi(2)));
        }
    }
}
