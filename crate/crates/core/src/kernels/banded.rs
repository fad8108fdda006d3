//! Banded matrices for 1D finite-difference operators, plus direct solvers
//! for shifted banded systems.
//!
//! Band storage convention: for offset `k >= 0` the band vector holds
//! `A[t, t+k]` for `t in 0..n-k`; for `k < 0` it holds `A[t+|k|, t]` for
//! `t in 0..n-|k|`. Periodic wrap entries `A[0, n-1]` and `A[n-1, 0]` are
//! stored separately as corners so band algebra stays purely diagonal.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Boundary condition tag for the 1D grid operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
    Neumann,
    Dirichlet,
}

/// Sparse matrix with a small set of nonzero diagonals and optional
/// periodic corner entries. Immutable after construction; all operations
/// return new values.
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    bands: BTreeMap<i64, Vec<f64>>,
    /// (A[0, n-1], A[n-1, 0]) when periodic wrap entries are present.
    corners: Option<(f64, f64)>,
    symmetric: bool,
}

impl BandedMatrix {
    /// Builds a matrix from explicit diagonals. Each band vector must have
    /// length `n - |offset|`; a symmetric matrix must supply mirrored bands
    /// with identical entries and equal corners.
    pub fn from_parts(
        n: usize,
        bands: Vec<(i64, Vec<f64>)>,
        corners: Option<(f64, f64)>,
        symmetric: bool,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("banded matrix must have n >= 1".into()));
        }
        let mut map = BTreeMap::new();
        for (k, vals) in bands {
            if k.unsigned_abs() as usize >= n {
                return Err(Error::InvalidArgument(format!(
                    "band offset {k} out of range for n={n}"
                )));
            }
            if vals.len() != n - k.unsigned_abs() as usize {
                return Err(Error::ShapeMismatch(format!(
                    "band at offset {k} has length {}, expected {}",
                    vals.len(),
                    n - k.unsigned_abs() as usize
                )));
            }
            if map.insert(k, vals).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate band offset {k}")));
            }
        }
        if corners.is_some() && n < 3 {
            return Err(Error::InvalidArgument("corner entries need n >= 3".into()));
        }
        let out = Self { n, bands: map, corners, symmetric };
        if symmetric && !out.is_structurally_symmetric() {
            return Err(Error::InvalidArgument(
                "symmetric flag set but bands/corners are not mirrored".into(),
            ));
        }
        Ok(out)
    }

    /// The all-zero n×n matrix.
    pub fn zeros(n: usize) -> Self {
        Self { n, bands: BTreeMap::new(), corners: None, symmetric: true }
    }

    /// c·I as a banded matrix.
    pub fn scaled_identity(n: usize, c: f64) -> Self {
        let mut bands = BTreeMap::new();
        bands.insert(0, vec![c; n]);
        Self { n, bands, corners: None, symmetric: true }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn corners(&self) -> Option<(f64, f64)> {
        self.corners
    }

    /// Offsets of stored bands, ascending.
    pub fn offsets(&self) -> Vec<i64> {
        self.bands.keys().copied().collect()
    }

    /// Number of stored band entries (corners not included).
    pub fn stored_entries(&self) -> usize {
        self.bands.values().map(Vec::len).sum()
    }

    fn is_structurally_symmetric(&self) -> bool {
        if let Some((a, b)) = self.corners {
            if a != b {
                return false;
            }
        }
        self.bands.iter().all(|(&k, vals)| match self.bands.get(&-k) {
            Some(mirror) => mirror == vals,
            None => vals.iter().all(|&v| v == 0.0),
        })
    }

    /// Entry A[i, j]; zero outside the stored pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.n && j < self.n, "index ({i},{j}) out of range for n={}", self.n);
        let mut val = 0.0;
        let k = j as i64 - i as i64;
        if let Some(vals) = self.bands.get(&k) {
            val += vals[i.min(j)];
        }
        if let Some((ur, ll)) = self.corners {
            if i == 0 && j == self.n - 1 {
                val += ur;
            }
            if i == self.n - 1 && j == 0 {
                val += ll;
            }
        }
        val
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for vals in self.bands.values() {
            for &v in vals {
                m = m.max(v.abs());
            }
        }
        if let Some((a, b)) = self.corners {
            m = m.max(a.abs()).max(b.abs());
        }
        m
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for (&k, vals) in &self.bands {
            for (t, &v) in vals.iter().enumerate() {
                let (i, j) = if k >= 0 { (t, t + k as usize) } else { (t + (-k) as usize, t) };
                out[(i, j)] += v;
            }
        }
        if let Some((ur, ll)) = self.corners {
            out[(0, self.n - 1)] += ur;
            out[(self.n - 1, 0)] += ll;
        }
        out
    }

    /// A·X for dense X (n×k).
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.n, "mul_dense: row count mismatch");
        let (n, cols) = (self.n, x.ncols());
        let mut y = DMatrix::zeros(n, cols);
        let xs = x.as_slice();
        let ys = y.as_mut_slice();
        for (&k, vals) in &self.bands {
            for j in 0..cols {
                let (xo, yo) = (j * n, j * n);
                if k >= 0 {
                    let k = k as usize;
                    for (t, &v) in vals.iter().enumerate() {
                        ys[yo + t] += v * xs[xo + t + k];
                    }
                } else {
                    let a = (-k) as usize;
                    for (t, &v) in vals.iter().enumerate() {
                        ys[yo + t + a] += v * xs[xo + t];
                    }
                }
            }
        }
        if let Some((ur, ll)) = self.corners {
            for j in 0..cols {
                let (xo, yo) = (j * n, j * n);
                ys[yo] += ur * xs[xo + n - 1];
                ys[yo + n - 1] += ll * xs[xo];
            }
        }
        y
    }

    /// X·A for dense X (k×n).
    pub fn mul_dense_right(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.ncols(), self.n, "mul_dense_right: column count mismatch");
        let n = self.n;
        let mut y = DMatrix::zeros(x.nrows(), n);
        for (&k, vals) in &self.bands {
            for (t, &v) in vals.iter().enumerate() {
                // A[i, j] contributes X[:, i]·v to Y[:, j].
                let (i, j) = if k >= 0 { (t, t + k as usize) } else { (t + (-k) as usize, t) };
                y.column_mut(j).axpy(v, &x.column(i), 1.0);
            }
        }
        if let Some((ur, ll)) = self.corners {
            y.column_mut(n - 1).axpy(ur, &x.column(0), 1.0);
            y.column_mut(0).axpy(ll, &x.column(n - 1), 1.0);
        }
        y
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let x = DMatrix::from_column_slice(self.n, 1, v.as_slice());
        DVector::from_column_slice(self.mul_dense(&x).as_slice())
    }

    pub fn transpose(&self) -> Self {
        let bands = self.bands.iter().map(|(&k, vals)| (-k, vals.clone())).collect();
        Self {
            n: self.n,
            bands,
            corners: self.corners.map(|(ur, ll)| (ll, ur)),
            symmetric: self.symmetric,
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        let bands = self
            .bands
            .iter()
            .map(|(&k, vals)| (k, vals.iter().map(|&v| c * v).collect()))
            .collect();
        Self {
            n: self.n,
            bands,
            corners: self.corners.map(|(ur, ll)| (c * ur, c * ll)),
            symmetric: self.symmetric,
        }
    }

    /// self + c·other.
    pub fn add_scaled(&self, other: &Self, c: f64) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::ShapeMismatch(format!(
                "add_scaled: sizes {} and {} differ",
                self.n, other.n
            )));
        }
        let mut bands = self.bands.clone();
        for (&k, vals) in &other.bands {
            let entry = bands.entry(k).or_insert_with(|| vec![0.0; vals.len()]);
            for (t, &v) in vals.iter().enumerate() {
                entry[t] += c * v;
            }
        }
        let corners = match (self.corners, other.corners) {
            (None, None) => None,
            (a, b) => {
                let (ur1, ll1) = a.unwrap_or((0.0, 0.0));
                let (ur2, ll2) = b.unwrap_or((0.0, 0.0));
                Some((ur1 + c * ur2, ll1 + c * ll2))
            }
        };
        let symmetric = self.symmetric && other.symmetric;
        Ok(Self { n: self.n, bands, corners, symmetric })
    }

    /// self + c·I.
    pub fn add_scaled_identity(&self, c: f64) -> Self {
        let mut bands = self.bands.clone();
        let diag = bands.entry(0).or_insert_with(|| vec![0.0; self.n]);
        for v in diag.iter_mut() {
            *v += c;
        }
        Self { n: self.n, bands, corners: self.corners, symmetric: self.symmetric }
    }

    /// Banded product A·B. Corner entries are not supported here; the band
    /// pattern of the result is the sum of the operand bandwidths.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::ShapeMismatch(format!(
                "matmul: sizes {} and {} differ",
                self.n, other.n
            )));
        }
        if self.corners.is_some() || other.corners.is_some() {
            return Err(Error::InvalidArgument("matmul does not support corner entries".into()));
        }
        let n = self.n as i64;
        let mut bands: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for (&ka, va) in &self.bands {
            for (&kb, vb) in &other.bands {
                let k = ka + kb;
                if k.unsigned_abs() as i64 >= n {
                    continue;
                }
                let out = bands.entry(k).or_insert_with(|| vec![0.0; (n - k.abs()) as usize]);
                // C[i, i+k] += A[i, i+ka]·B[i+ka, i+k]; i+ka must be in range.
                for (t, slot) in out.iter_mut().enumerate() {
                    let i = if k >= 0 { t as i64 } else { t as i64 - k };
                    let mid = i + ka;
                    if mid < 0 || mid >= n {
                        continue;
                    }
                    let j = i + k;
                    let a = band_entry(va, ka, i, mid);
                    let b = band_entry(vb, kb, mid, j);
                    *slot += a * b;
                }
            }
        }
        bands.retain(|_, vals| vals.iter().any(|&v| v != 0.0));
        Ok(Self { n: self.n, bands, corners: None, symmetric: false })
    }

    /// Aᵀ·A, marked symmetric. Requires no corner entries.
    pub fn gram_product(&self) -> Result<Self> {
        let mut out = self.transpose().matmul(self)?;
        out.symmetric = out.is_structurally_symmetric();
        Ok(out)
    }
}

/// Band entry A[i, j] assuming (i, j) lies on the band with offset k = j - i.
fn band_entry(vals: &[f64], k: i64, i: i64, j: i64) -> f64 {
    debug_assert_eq!(j - i, k);
    vals[i.min(j) as usize]
}

/// Second-order finite-difference Laplacian on n grid points with spacing h,
/// scaled by 1/h². Negative semidefinite by construction: periodic and
/// Neumann rows sum to zero; Dirichlet is the plain tridiagonal stencil.
pub fn build_laplacian(n: usize, h: f64, bc: Boundary) -> Result<BandedMatrix> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("laplacian needs n >= 3, got {n}")));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("grid spacing must be positive, got {h}")));
    }
    let s = 1.0 / (h * h);
    let diag = vec![-2.0 * s; n];
    let mut upper = vec![s; n - 1];
    let mut lower = vec![s; n - 1];
    let (corners, symmetric) = match bc {
        Boundary::Periodic => (Some((s, s)), true),
        Boundary::Neumann => {
            // Mirror ghost points double the off-diagonal flux at both ends.
            upper[0] = 2.0 * s;
            lower[n - 2] = 2.0 * s;
            (None, false)
        }
        Boundary::Dirichlet => (None, true),
    };
    BandedMatrix::from_parts(n, vec![(0, diag), (1, upper), (-1, lower)], corners, symmetric)
}

/// First-order forward-difference operator scaled by 1/h: -1 on the
/// diagonal, +1 on the superdiagonal, and for the periodic variant a +1
/// wrap entry in the lower-left corner.
pub fn build_forward_difference(n: usize, h: f64, bc: Boundary) -> Result<BandedMatrix> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("forward difference needs n >= 3, got {n}")));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("grid spacing must be positive, got {h}")));
    }
    let s = 1.0 / h;
    let corners = match bc {
        Boundary::Periodic => Some((0.0, s)),
        Boundary::Dirichlet => None,
        Boundary::Neumann => {
            return Err(Error::InvalidArgument(
                "forward difference supports periodic or dirichlet boundaries".into(),
            ))
        }
    };
    BandedMatrix::from_parts(n, vec![(0, vec![-s; n]), (1, vec![s; n - 1])], corners, false)
}

/// LU factorization of a banded matrix without pivoting, with the periodic
/// corner entries handled through a rank-one bordered Schur complement.
/// Unpivoted elimination is adequate for the diagonally dominant and
/// positive definite systems this crate produces; pivots are checked
/// against a threshold and failure is reported rather than patched.
pub struct BandedFactor {
    n: usize,
    wl: usize,
    wu: usize,
    /// Compact LU storage: ab[(wu + i - j, j)] holds entry (i, j).
    ab: DMatrix<f64>,
    border: Option<Border>,
}

struct Border {
    /// T⁻¹·s where s is the last column of A above the diagonal block.
    z: DVector<f64>,
    /// Last row of A left of the diagonal block.
    q: DVector<f64>,
    /// d - qᵀ·z.
    schur: f64,
}

impl BandedFactor {
    /// Factors `a` with pivot threshold 1e-14·max|a|.
    pub fn new(a: &BandedMatrix) -> Result<Self> {
        Self::with_threshold(a, 1e-14 * a.max_abs())
    }

    /// Factors `a`, rejecting any pivot with |pivot| <= threshold.
    pub fn with_threshold(a: &BandedMatrix, threshold: f64) -> Result<Self> {
        if a.corners.is_none() {
            return Self::factor_plain(a, a.n, threshold, None);
        }
        // Bordered elimination: factor the leading (n-1) block, then form
        // the scalar Schur complement of the last row/column (which carry
        // the corner entries).
        let n = a.n;
        let mut s = DVector::zeros(n - 1);
        let mut q = DVector::zeros(n - 1);
        for i in 0..n - 1 {
            s[i] = a.get(i, n - 1);
            q[i] = a.get(n - 1, i);
        }
        let d = a.get(n - 1, n - 1);
        let inner = Self::factor_plain(a, n - 1, threshold, Some(n))?;
        let z = {
            let mut z = DMatrix::from_column_slice(n - 1, 1, s.as_slice());
            inner.solve_plain(&mut z);
            DVector::from_column_slice(z.as_slice())
        };
        let schur = d - q.dot(&z);
        if !schur.is_finite() {
            return Err(Error::NonFinite("bordered banded factorization"));
        }
        if schur.abs() <= threshold {
            return Err(Error::SingularShift { pivot: schur.abs(), threshold });
        }
        Ok(Self {
            n,
            wl: inner.wl,
            wu: inner.wu,
            ab: inner.ab,
            border: Some(Border { z, q, schur }),
        })
    }

    /// Factors the leading m×m block of `a` (bands only). `full_n` is Some
    /// when this is the inner block of a bordered factorization.
    fn factor_plain(
        a: &BandedMatrix,
        m: usize,
        threshold: f64,
        full_n: Option<usize>,
    ) -> Result<Self> {
        let wl = a.bands.keys().filter(|&&k| k < 0).map(|&k| (-k) as usize).max().unwrap_or(0);
        let wu = a.bands.keys().filter(|&&k| k > 0).map(|&k| k as usize).max().unwrap_or(0);
        assert!(m > wl && m > wu, "bandwidth must be below the factored block size");
        let mut ab = DMatrix::zeros(wl + wu + 1, m);
        for (&k, vals) in &a.bands {
            let len = m - k.unsigned_abs() as usize;
            for (t, &v) in vals.iter().take(len).enumerate() {
                let (i, j) = if k >= 0 { (t, t + k as usize) } else { (t + (-k) as usize, t) };
                ab[(wu + i - j, j)] = v;
            }
        }
        for col in 0..m {
            let pivot = ab[(wu, col)];
            if !pivot.is_finite() {
                return Err(Error::NonFinite("banded factorization"));
            }
            if pivot.abs() <= threshold {
                return Err(Error::SingularShift { pivot: pivot.abs(), threshold });
            }
            for i in col + 1..=(col + wl).min(m - 1) {
                let mult = ab[(wu + i - col, col)] / pivot;
                ab[(wu + i - col, col)] = mult;
                for j in col + 1..=(col + wu).min(m - 1) {
                    let u = ab[(wu + col - j, j)];
                    ab[(wu + i - j, j)] -= mult * u;
                }
            }
        }
        Ok(Self { n: full_n.unwrap_or(m), wl, wu, ab, border: None })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Solves A·X = B, column by column.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.n, "solve: row count mismatch");
        let mut x = b.clone();
        match &self.border {
            None => self.solve_plain(&mut x),
            Some(border) => {
                let n = self.n;
                for c in 0..x.ncols() {
                    let bn = x[(n - 1, c)];
                    let mut head = DMatrix::zeros(n - 1, 1);
                    for i in 0..n - 1 {
                        head[(i, 0)] = x[(i, c)];
                    }
                    self.solve_plain(&mut head);
                    let y = DVector::from_column_slice(head.as_slice());
                    let xn = (bn - border.q.dot(&y)) / border.schur;
                    for i in 0..n - 1 {
                        x[(i, c)] = y[i] - border.z[i] * xn;
                    }
                    x[(n - 1, c)] = xn;
                }
            }
        }
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let x = self.solve(&DMatrix::from_column_slice(self.n, 1, b.as_slice()));
        DVector::from_column_slice(x.as_slice())
    }

    /// In-place LU solve on the factored (corner-free) block.
    fn solve_plain(&self, x: &mut DMatrix<f64>) {
        let m = self.ab.ncols();
        let (wl, wu) = (self.wl, self.wu);
        for c in 0..x.ncols() {
            for col in 0..m {
                let xc = x[(col, c)];
                if xc != 0.0 {
                    for i in col + 1..=(col + wl).min(m - 1) {
                        let mult = self.ab[(wu + i - col, col)];
                        x[(i, c)] -= mult * xc;
                    }
                }
            }
            for col in (0..m).rev() {
                let mut v = x[(col, c)];
                for j in col + 1..=(col + wu).min(m - 1) {
                    v -= self.ab[(wu + col - j, j)] * x[(j, c)];
                }
                x[(col, c)] = v / self.ab[(wu, col)];
            }
        }
    }
}

/// Solves (A + d·I)·X = B directly. The factorization is recomputed per
/// call; callers that reuse a shift should build a [`BandedFactor`] once.
/// Singular or near-singular shifts (pivot at or below 1e-14·max|A|) are
/// reported as errors.
pub fn shifted_solve(a: &BandedMatrix, d: f64, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != a.n {
        return Err(Error::ShapeMismatch(format!(
            "shifted_solve: matrix size {} vs right-hand side rows {}",
            a.n,
            b.nrows()
        )));
    }
    let shifted = a.add_scaled_identity(d);
    let factor = BandedFactor::with_threshold(&shifted, 1e-14 * a.max_abs())?;
    Ok(factor.solve(b))
}
