//! Time integration: dense reference schemes (classical RK4 and an
//! implicit-explicit Crank-Nicolson leapfrog) and the low-rank implicit
//! steppers that solve one trust-region problem per time step, with rank
//! adaptation between steps.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::banded::{build_laplacian, BandedFactor, BandedMatrix, Boundary};
use crate::manifold::{project_dense, Anchor, FixedRankPoint};
use crate::problems::{AceStepProblem, FkppStepProblem};
use crate::rtr::{rtr_minimize, RtrConfig, RtrReport, StopReason};

/// Uniform time grid with an exact number of steps.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    /// `(t_end - t0) / dt` must be integral to within 1e-9.
    pub fn new(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time step must be positive and finite, got {dt}"
            )));
        }
        if !(t_end > t0) {
            return Err(Error::InvalidArgument(format!("empty time span [{t0}, {t_end}]")));
        }
        let raw = (t_end - t0) / dt;
        let rounded = raw.round();
        if (raw - rounded).abs() > 1e-9 || rounded < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "span {t_end} - {t0} is not an integral number of steps of {dt}"
            )));
        }
        Ok(Self { t0, t_end, dt, n_steps: rounded as usize })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Time after `k` steps; computed as a product to avoid drift.
    pub fn time_at(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt
        }
    }
}

/// Rank truncation and growth rules applied between time steps.
#[derive(Debug, Clone)]
pub struct RankPolicy {
    /// Relative singular-value threshold below which directions are cut.
    pub trunc_tol: f64,
    /// Working-rank increment when the current rank is fully used.
    pub probe: usize,
    pub min_rank: usize,
    pub max_rank: usize,
    /// Relative threshold for numerical-rank diagnostics (reporting
    /// only; never feeds back into the integration).
    pub diag_tol: f64,
}

impl RankPolicy {
    /// Defaults for the phase-field runs: diagnostics at 1e-10.
    pub fn ace_default() -> Self {
        Self { trunc_tol: 1e-8, probe: 2, min_rank: 1, max_rank: 40, diag_tol: 1e-10 }
    }

    /// Defaults for the reaction-diffusion ensemble runs: diagnostics at
    /// 1e-11.
    pub fn fkpp_default() -> Self {
        Self { trunc_tol: 1e-8, probe: 2, min_rank: 1, max_rank: 40, diag_tol: 1e-11 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.trunc_tol > 0.0 && self.trunc_tol < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "truncation tolerance must lie in (0, 1), got {}",
                self.trunc_tol
            )));
        }
        if !(self.diag_tol > 0.0 && self.diag_tol < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "diagnostic tolerance must lie in (0, 1), got {}",
                self.diag_tol
            )));
        }
        if self.min_rank == 0 || self.min_rank > self.max_rank {
            return Err(Error::InvalidArgument(format!(
                "rank bounds [{}, {}] are invalid",
                self.min_rank, self.max_rank
            )));
        }
        if self.probe == 0 {
            return Err(Error::InvalidArgument("probe increment must be positive".into()));
        }
        Ok(())
    }
}

/// Compact summary of one inner trust-region solve.
#[derive(Debug, Clone)]
pub struct SolveSummary {
    pub n_outer: usize,
    pub total_inner: usize,
    pub max_inner: usize,
    pub final_cost: f64,
    pub final_grad_norm: f64,
    pub converged: bool,
    /// Rank-growth retries spent on this step.
    pub retries: u32,
}

impl SolveSummary {
    fn from_report(report: &RtrReport, retries: u32) -> Self {
        Self {
            n_outer: report.n_outer,
            total_inner: report.total_inner,
            max_inner: report.iterations.iter().map(|it| it.n_inner).max().unwrap_or(0),
            final_cost: report.final_cost,
            final_grad_norm: report.final_grad_norm,
            converged: report.stop == StopReason::Converged,
            retries,
        }
    }
}

/// One recorded time level of a low-rank integration.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    pub rank: usize,
    pub solve: Option<SolveSummary>,
    pub error_vs_ref: Option<f64>,
    /// Discrete L2 norm of the evolution right-hand side, where the
    /// scheme defines one.
    pub l2_rhs_norm: Option<f64>,
}

/// Time-ordered step records; times are strictly increasing.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    steps: Vec<StepRecord>,
}

impl TrajectoryRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if record.t <= last.t {
                return Err(Error::InvalidArgument(format!(
                    "record times must be strictly increasing ({} after {})",
                    record.t, last.t
                )));
            }
        }
        self.steps.push(record);
        Ok(())
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.steps.last()
    }
}

/// Dense state sampled along a reference integration.
#[derive(Debug, Clone)]
pub struct DenseSample {
    pub t: f64,
    pub state: DMatrix<f64>,
}

/// Reference trajectory stored at a stride, plus optional numerical-rank
/// diagnostics at the same times.
#[derive(Debug, Clone, Default)]
pub struct DenseTrajectory {
    pub samples: Vec<DenseSample>,
    pub ranks: Vec<(f64, usize)>,
}

impl DenseTrajectory {
    /// Sample at time `t` within 1e-6, if one was stored.
    pub fn at_time(&self, t: f64) -> Option<&DMatrix<f64>> {
        self.samples.iter().find(|s| (s.t - t).abs() <= 1e-6).map(|s| &s.state)
    }

    pub fn final_state(&self) -> Option<&DenseSample> {
        self.samples.last()
    }
}

/// Grid geometry factor turning Frobenius norms into discrete L2 norms.
#[derive(Debug, Clone, Copy)]
pub enum L2Geometry {
    /// One space dimension, realizations in columns: weight sqrt(h).
    Line { h: f64 },
    /// Two space dimensions on a square grid: weight h.
    Plane { h: f64 },
}

impl L2Geometry {
    pub fn weight(&self) -> f64 {
        match self {
            L2Geometry::Line { h } => h.sqrt(),
            L2Geometry::Plane { h } => *h,
        }
    }
}

/// Discrete L2 distance between two equally shaped dense states.
pub fn l2_error(w: &DMatrix<f64>, w_ref: &DMatrix<f64>, geometry: L2Geometry) -> Result<f64> {
    if w.shape() != w_ref.shape() {
        return Err(Error::ShapeMismatch(format!(
            "states are {:?} and {:?}",
            w.shape(),
            w_ref.shape()
        )));
    }
    Ok(geometry.weight() * (w - w_ref).norm())
}

/// Count of singular values above `rel_tol` times the largest.
pub fn numerical_rank(w: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = w.clone().singular_values();
    let smax = sv.max();
    if !(smax > 0.0) {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Truncated SVD of a dense state, clamped to the policy's rank bounds.
pub fn truncate_dense(w: &DMatrix<f64>, policy: &RankPolicy) -> Result<FixedRankPoint> {
    policy.validate()?;
    let svd = w.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let vt = svd.v_t.as_ref().expect("svd requested v_t");
    let sv = &svd.singular_values;
    let smax = sv.max();
    if !(smax > 0.0) {
        return Err(Error::InvalidArgument("cannot truncate a zero state".into()));
    }
    let keep = sv.iter().filter(|&&s| s >= policy.trunc_tol * smax).count();
    let cap = policy.max_rank.min(sv.len());
    let rank = keep.clamp(policy.min_rank.min(cap), cap);
    let u_r = u.columns(0, rank).into_owned();
    let v_r = vt.rows(0, rank).transpose();
    let s_r = DVector::from_fn(rank, |i, _| sv[i]);
    FixedRankPoint::new(u_r, s_r, v_r)
}

/// Truncate small directions; grow the working rank when saturated.
///
/// Directions with σᵢ/σ₁ below the policy tolerance are cut. If nothing
/// was cut the current rank is fully used, and the working rank grows by
/// the probe increment (up to the maximum): the factors are padded with
/// orthonormal complement directions carrying a singular value two
/// decades below the truncation threshold, so unused headroom is removed
/// again at the next adaptation.
pub fn rank_adapt(x: &FixedRankPoint, policy: &RankPolicy) -> Result<FixedRankPoint> {
    policy.validate()?;
    let r = x.rank();
    let s1 = x.sigma()[0];
    let keep = x
        .sigma()
        .iter()
        .filter(|&&s| s / s1 >= policy.trunc_tol)
        .count()
        .clamp(policy.min_rank.min(r), policy.max_rank.min(r));
    if keep < r {
        return x.truncate(keep);
    }
    // Growth is capped by the policy and by the matrix dimensions.
    let cap = policy.max_rank.min(x.nrows()).min(x.ncols());
    let grown = (r + policy.probe).min(cap);
    if grown <= r {
        return Ok(x.clone());
    }
    let pad = grown - r;
    let sigma_pad = s1 * policy.trunc_tol * 1e-2;
    let u = pad_orthonormal(x.u(), pad, 0x5eed_0001)?;
    let v = pad_orthonormal(x.v(), pad, 0x5eed_0002)?;
    let mut sigma = DVector::zeros(grown);
    sigma.rows_mut(0, r).copy_from(x.sigma());
    for i in r..grown {
        sigma[i] = sigma_pad;
    }
    FixedRankPoint::new(u, sigma, v)
}

/// Appends `pad` orthonormal columns to an orthonormal basis. The
/// directions come from a fixed-seed stream so runs are reproducible.
fn pad_orthonormal(basis: &DMatrix<f64>, pad: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = basis.nrows();
    let r = basis.ncols();
    if r + pad > n {
        return Err(Error::InvalidArgument(format!(
            "cannot extend a {n}x{r} basis by {pad} columns"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(n, r + pad);
    out.columns_mut(0, r).copy_from(basis);
    for j in r..r + pad {
        // Two projection passes keep orthogonality at working precision
        // even when the random draw nearly lies in the current span.
        'draw: loop {
            let mut w = DVector::from_fn(n, |_, _| rng.gen::<f64>() - 0.5);
            for _ in 0..2 {
                let coeffs = out.columns(0, j).transpose() * &w;
                w -= out.columns(0, j) * coeffs;
            }
            let norm = w.norm();
            if norm > 1e-8 {
                out.set_column(j, &(w / norm));
                break 'draw;
            }
        }
    }
    Ok(out)
}

/// Classical fourth-order Runge-Kutta on a matrix ODE dW/dt = G(W),
/// sampling the state every `sample_stride` time units (the final state
/// is always stored).
pub fn erk4_dense<G>(
    g: G,
    w0: &DMatrix<f64>,
    grid: &TimeGrid,
    sample_stride: f64,
) -> Result<DenseTrajectory>
where
    G: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let record_every = stride_steps(grid, sample_stride);
    let mut out = DenseTrajectory::default();
    let mut w = w0.clone();
    out.samples.push(DenseSample { t: grid.t0(), state: w.clone() });
    let dt = grid.dt();
    for k in 0..grid.n_steps() {
        let k1 = g(&w);
        let k2 = g(&(&w + &k1 * (dt / 2.0)));
        let k3 = g(&(&w + &k2 * (dt / 2.0)));
        let k4 = g(&(&w + &k3 * dt));
        w += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        let t = grid.time_at(k + 1);
        if !w.iter().all(|x| x.is_finite()) {
            return Err(Error::Solver(format!("non-finite state at step {} (t = {t})", k + 1)));
        }
        if (k + 1) % record_every == 0 || k + 1 == grid.n_steps() {
            out.samples.push(DenseSample { t, state: w.clone() });
        }
    }
    Ok(out)
}

/// Steps between stored samples for a requested stride.
fn stride_steps(grid: &TimeGrid, sample_stride: f64) -> usize {
    if !(sample_stride > 0.0) || !sample_stride.is_finite() {
        return grid.n_steps().max(1);
    }
    ((sample_stride / grid.dt()).round() as usize).clamp(1, grid.n_steps().max(1))
}

// ---------------------------------------------------------------------
// Phase-field model (stiff reaction-diffusion on a periodic square).
// ---------------------------------------------------------------------

/// Periodic square-grid model dW/dt = ε(AW + WA) + W − W°³ with its
/// standard initial condition.
#[derive(Debug, Clone)]
pub struct AceModel {
    n: usize,
    h: f64,
    epsilon: f64,
    a: BandedMatrix,
}

impl AceModel {
    pub fn new(n: usize, epsilon: f64) -> Result<Self> {
        if n < 4 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 4 points per side, got {n}"
            )));
        }
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "diffusion coefficient must be finite and nonnegative, got {epsilon}"
            )));
        }
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let a = build_laplacian(n, h, Boundary::Periodic)?;
        Ok(Self { n, h, epsilon, a })
    }

    /// The production configuration: 256 points per side, ε = 0.1.
    pub fn standard() -> Self {
        Self::new(256, 0.1).expect("standard grid is valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn laplacian(&self) -> &BandedMatrix {
        &self.a
    }

    /// Grid coordinate of index `i` on [-π, π) (periodic, right endpoint
    /// excluded).
    pub fn coord(&self, i: usize) -> f64 {
        -std::f64::consts::PI + i as f64 * self.h
    }

    /// Evolution right-hand side G(W) = ε(AW + WA) + W − W°³.
    pub fn rhs(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let aw = self.a.mul_dense(w);
        let wa = self.a.mul_dense_right(w);
        let mut out = (aw + wa) * self.epsilon;
        out.zip_apply(w, |o, x| *o += x - x * x * x);
        out
    }

    /// Discrete L2 norm on the square grid.
    pub fn l2_norm(&self, w: &DMatrix<f64>) -> f64 {
        self.h * w.norm()
    }

    /// Standard initial field: a combination of five scaled copies of a
    /// localized bump, deliberately far from low rank.
    pub fn initial_condition(&self) -> DMatrix<f64> {
        let pi = std::f64::consts::PI;
        DMatrix::from_fn(self.n, self.n, |i, j| {
            let x = self.coord(i);
            let y = self.coord(j);
            bump(x, y) - bump(x, 2.0 * y) + bump(3.0 * x + pi, 3.0 * y + pi)
                - 2.0 * bump(4.0 * x, 4.0 * y)
                + 2.0 * bump(5.0 * x, 5.0 * y)
        })
    }
}

/// Localized bump u(x, y); the tangent and cosecant singularities
/// resolve to 0 in IEEE arithmetic (overflow to +inf only ever lands in
/// the denominator).
fn bump(x: f64, y: f64) -> f64 {
    let tx = x.tan();
    let ty = y.tan();
    let numer = ((-tx * tx).exp() + (-ty * ty).exp()) * x.sin() * y.sin();
    let cx = (1.0 / (-x / 2.0).sin()).abs();
    let cy = (1.0 / (-y / 2.0).sin()).abs();
    let denom = 1.0 + cx.exp() + cy.exp();
    numer / denom
}

/// Dense warmup end time: the first multiple of `dt` at or after the
/// nominal handover time.
pub fn warmup_end(nominal: f64, dt: f64) -> f64 {
    (nominal / dt - 1e-9).ceil() * dt
}

/// Configuration for a low-rank implicit-Euler phase-field run.
#[derive(Debug, Clone)]
pub struct AceRunConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Nominal dense-to-low-rank handover time; the actual handover is
    /// the first multiple of `dt` at or after it.
    pub handover: f64,
    /// Dense warmup integrator step.
    pub warmup_dt: f64,
    /// Factored-gradient width budget passed to each step problem.
    pub grad_cap: Option<usize>,
}

impl AceRunConfig {
    pub fn standard(dt: f64, t_end: f64) -> Self {
        Self { dt, t_end, handover: 0.5, warmup_dt: 1e-4, grad_cap: None }
    }
}

/// Output of a low-rank run: per-step records plus the final point.
#[derive(Debug)]
pub struct LowRankRun {
    pub trajectory: TrajectoryRecord,
    pub final_point: FixedRankPoint,
}

/// Dense warmup for the phase-field run: RK4 from t = 0 to the handover
/// time, returning the final dense state.
pub fn ace_warmup(model: &AceModel, cfg: &AceRunConfig) -> Result<DMatrix<f64>> {
    let end = warmup_end(cfg.handover, cfg.dt);
    let grid = TimeGrid::new(0.0, end, cfg.warmup_dt)?;
    let w0 = model.initial_condition();
    let traj = erk4_dense(|w| model.rhs(w), &w0, &grid, f64::INFINITY)?;
    Ok(traj.samples.last().expect("warmup stores the final state").state.clone())
}

/// Low-rank implicit Euler for the phase-field model.
///
/// Phase 1 integrates densely (RK4 at `warmup_dt`) until the handover
/// time, then truncates. Phase 2 minimizes the implicit-Euler step
/// energy once per step with the preconditioned trust-region solver,
/// adapting the rank between steps. A step whose solve stalls with a
/// large gradient is retried once at a grown rank.
///
/// `warm_state` skips phase 1 when the caller already holds the dense
/// state at the handover time. `reference` supplies dense states at
/// matching times for error reporting.
pub fn lr_implicit_euler_ace(
    model: &AceModel,
    cfg: &AceRunConfig,
    policy: &RankPolicy,
    rtr: &RtrConfig,
    warm_state: Option<&DMatrix<f64>>,
    reference: Option<&DenseTrajectory>,
) -> Result<LowRankRun> {
    policy.validate()?;
    let start = warmup_end(cfg.handover, cfg.dt);
    if !(cfg.t_end > start) {
        return Err(Error::InvalidArgument(format!(
            "end time {} does not leave room for low-rank steps after the handover at {start}",
            cfg.t_end
        )));
    }
    let grid = TimeGrid::new(start, cfg.t_end, cfg.dt)?;
    let dense_start = match warm_state {
        Some(w) => {
            if w.shape() != (model.n(), model.n()) {
                return Err(Error::ShapeMismatch(format!(
                    "warm state is {:?}, expected {}x{}",
                    w.shape(),
                    model.n(),
                    model.n()
                )));
            }
            w.clone()
        }
        None => ace_warmup(model, cfg)?,
    };
    // The anchor carries probing headroom between steps; the history
    // level W̃ is always the unpadded solved state.
    let mut anchor_point = truncate_dense(&dense_start, policy)?;
    let mut hist = anchor_point.to_factored();
    let mut trajectory = TrajectoryRecord::new();
    let geometry = L2Geometry::Plane { h: model.h() };

    for k in 0..grid.n_steps() {
        let t = grid.time_at(k + 1);
        let prev = hist.clone();
        let (solved, summary) =
            solve_step(k, t, &anchor_point, rtr, policy, |anchor_rank_point| {
                let problem = AceStepProblem::new(
                    model.n(),
                    cfg.dt,
                    model.epsilon(),
                    prev.clone(),
                    cfg.grad_cap,
                )?;
                let x0: Anchor = Arc::new(anchor_rank_point.clone());
                rtr_minimize(&problem, x0, rtr)
            })?;
        let dense = solved.to_dense();
        let error_vs_ref = match reference.and_then(|r| r.at_time(t)) {
            Some(state) => Some(l2_error(&dense, state, geometry)?),
            None => None,
        };
        let l2_rhs = model.l2_norm(&model.rhs(&dense));
        trajectory.push(StepRecord {
            t,
            rank: solved.rank(),
            solve: Some(summary),
            error_vs_ref,
            l2_rhs_norm: Some(l2_rhs),
        })?;
        hist = solved.to_factored();
        anchor_point = if k + 1 == grid.n_steps() { solved } else { rank_adapt(&solved, policy)? };
    }
    Ok(LowRankRun { trajectory, final_point: anchor_point })
}

/// Runs one implicit step's trust-region solve with the module's
/// retry-on-stall policy: a solve that exhausts its budget while the
/// gradient is still more than 1e3 times the tolerance is retried once
/// from a probe-grown anchor; a second stall aborts the run.
fn solve_step<F>(
    step: usize,
    t: f64,
    anchor: &FixedRankPoint,
    rtr: &RtrConfig,
    policy: &RankPolicy,
    mut solve: F,
) -> Result<(FixedRankPoint, SolveSummary)>
where
    F: FnMut(&FixedRankPoint) -> Result<RtrReport>,
{
    let report = solve(anchor)?;
    let stalled =
        |r: &RtrReport| r.stop != StopReason::Converged && r.final_grad_norm > 1e3 * rtr.grad_tol;
    if !stalled(&report) {
        let summary = SolveSummary::from_report(&report, 0);
        return Ok((Arc::try_unwrap(report.point).unwrap_or_else(|p| (*p).clone()), summary));
    }
    let grown = rank_adapt_grow_for_retry(anchor, policy)?;
    let retry = solve(&grown)?;
    if stalled(&retry) {
        return Err(Error::Solver(format!(
            "step {} (t = {t}) failed twice: gradient {} after rank-growth retry",
            step + 1,
            retry.final_grad_norm
        )));
    }
    let summary = SolveSummary::from_report(&retry, 1);
    Ok((Arc::try_unwrap(retry.point).unwrap_or_else(|p| (*p).clone()), summary))
}

/// Unconditional probe growth used by the retry path.
fn rank_adapt_grow_for_retry(x: &FixedRankPoint, policy: &RankPolicy) -> Result<FixedRankPoint> {
    let r = x.rank();
    let cap = policy.max_rank.min(x.nrows()).min(x.ncols());
    let grown = (r + policy.probe).min(cap);
    if grown <= r {
        return Err(Error::RankBudget { needed: r + policy.probe, budget: cap });
    }
    let pad = grown - r;
    let sigma_pad = x.sigma()[0] * policy.trunc_tol * 1e-2;
    let u = pad_orthonormal(x.u(), pad, 0x5eed_0003)?;
    let v = pad_orthonormal(x.v(), pad, 0x5eed_0004)?;
    let mut sigma = DVector::zeros(grown);
    sigma.rows_mut(0, r).copy_from(x.sigma());
    for i in r..grown {
        sigma[i] = sigma_pad;
    }
    FixedRankPoint::new(u, sigma, v)
}

// ---------------------------------------------------------------------
// Reaction-diffusion ensemble (logistic reaction, Neumann line domain).
// ---------------------------------------------------------------------

/// Line-domain model for the realization ensemble: x ∈ [0, 40] with a
/// ghost-point Neumann Laplacian; realizations live in columns.
#[derive(Debug, Clone)]
pub struct FkppModel {
    nx: usize,
    n_real: usize,
    hx: f64,
    a: BandedMatrix,
}

impl FkppModel {
    pub fn new(nx: usize, n_real: usize) -> Result<Self> {
        if nx < 3 || n_real == 0 {
            return Err(Error::InvalidArgument(format!("grid {nx} x {n_real} is too small")));
        }
        let hx = 40.0 / (nx as f64 - 1.0);
        let a = build_laplacian(nx, hx, Boundary::Neumann)?;
        Ok(Self { nx, n_real, hx, a })
    }

    /// The production configuration: 1000 grid points, 1000 realizations.
    pub fn standard() -> Self {
        Self::new(1000, 1000).expect("standard grid is valid")
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn hx(&self) -> f64 {
        self.hx
    }

    pub fn laplacian(&self) -> &BandedMatrix {
        &self.a
    }

    pub fn coord(&self, i: usize) -> f64 {
        i as f64 * self.hx
    }

    /// Initial ensemble w(x, 0) = a e^{-b x²}, one realization per
    /// column.
    pub fn initial_condition(&self, draws: &FkppDraws) -> Result<DMatrix<f64>> {
        if draws.len() != self.n_real {
            return Err(Error::ShapeMismatch(format!(
                "{} draws for {} realizations",
                draws.len(),
                self.n_real
            )));
        }
        Ok(DMatrix::from_fn(self.nx, self.n_real, |i, j| {
            let x = self.coord(i);
            draws.amp[j] * (-draws.width[j] * x * x).exp()
        }))
    }
}

/// Per-realization random coefficients.
#[derive(Debug, Clone)]
pub struct FkppDraws {
    /// Initial amplitude a ~ U[1/5, 2/5].
    pub amp: DVector<f64>,
    /// Initial spread b ~ U[1/10, 11/10].
    pub width: DVector<f64>,
    /// Reaction rate r ~ U[1/4, 1/2].
    pub rates: DVector<f64>,
}

impl FkppDraws {
    pub fn len(&self) -> usize {
        self.amp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amp.len() == 0
    }
}

/// Samples the ensemble coefficients from one seeded stream, drawing
/// (amplitude, spread, rate) per realization in that order, so a prefix
/// of the ensemble is stable under changes of the ensemble size.
pub fn sample_fkpp(seed: u64, n_real: usize) -> FkppDraws {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut amp = DVector::zeros(n_real);
    let mut width = DVector::zeros(n_real);
    let mut rates = DVector::zeros(n_real);
    for i in 0..n_real {
        amp[i] = rng.gen_range(0.2..0.4);
        width[i] = rng.gen_range(0.1..1.1);
        rates[i] = rng.gen_range(0.25..0.5);
    }
    FkppDraws { amp, width, rates }
}

/// One Crank-Nicolson leapfrog stepper: the implicit factor is built
/// once and shared by the bootstrap and every step.
pub struct CnlfStepper {
    factor: BandedFactor,
    mp: BandedMatrix,
    rates: DVector<f64>,
    dt: f64,
}

impl CnlfStepper {
    pub fn new(a: &BandedMatrix, rates: &DVector<f64>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time step must be positive and finite, got {dt}"
            )));
        }
        let mm = a.scale(-dt).add_scaled_identity(1.0);
        let mp = a.scale(dt).add_scaled_identity(1.0);
        Ok(Self { factor: BandedFactor::new(&mm)?, mp, rates: rates.clone(), dt })
    }

    /// Logistic reaction c (W − W°²) R with R = diag(rates) acting on the
    /// realization axis.
    fn reaction(&self, w: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
        let mut out = w - w.component_mul(w);
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col *= c * self.rates[j];
        }
        out
    }

    /// Starting level W¹ from one diffusion-implicit Euler step.
    pub fn bootstrap(&self, w0: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = w0 + self.reaction(w0, self.dt);
        self.factor.solve(&rhs)
    }

    /// Leapfrog update across levels (n-1, n) -> n+1.
    pub fn step(&self, w_nm1: &DMatrix<f64>, w_n: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = self.mp.mul_dense(w_nm1) + self.reaction(w_n, 2.0 * self.dt);
        self.factor.solve(&rhs)
    }
}

/// Dense Crank-Nicolson leapfrog reference run, with numerical-rank
/// diagnostics at each stored sample when `diag_tol` is given.
pub fn imex_cnlf_dense(
    a: &BandedMatrix,
    rates: &DVector<f64>,
    w0: &DMatrix<f64>,
    grid: &TimeGrid,
    sample_stride: f64,
    diag_tol: Option<f64>,
) -> Result<DenseTrajectory> {
    if w0.ncols() != rates.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} state columns for {} rates",
            w0.ncols(),
            rates.len()
        )));
    }
    let stepper = CnlfStepper::new(a, rates, grid.dt())?;
    let record_every = stride_steps(grid, sample_stride);
    let mut out = DenseTrajectory::default();
    let record = |t: f64, w: &DMatrix<f64>, out: &mut DenseTrajectory| {
        out.samples.push(DenseSample { t, state: w.clone() });
        if let Some(tol) = diag_tol {
            out.ranks.push((t, numerical_rank(w, tol)));
        }
    };
    record(grid.t0(), w0, &mut out);
    if grid.n_steps() < 1 {
        return Ok(out);
    }
    let mut prev = w0.clone();
    let mut cur = stepper.bootstrap(w0);
    check_cnlf_finite(&cur, 1, grid.time_at(1))?;
    if record_every == 1 || grid.n_steps() == 1 {
        record(grid.time_at(1), &cur, &mut out);
    }
    for k in 2..=grid.n_steps() {
        let next = stepper.step(&prev, &cur);
        let t = grid.time_at(k);
        check_cnlf_finite(&next, k, t)?;
        prev = cur;
        cur = next;
        if k % record_every == 0 || k == grid.n_steps() {
            record(t, &cur, &mut out);
        }
    }
    Ok(out)
}

fn check_cnlf_finite(w: &DMatrix<f64>, step: usize, t: f64) -> Result<()> {
    if w.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Solver(format!("non-finite state at step {step} (t = {t})")))
    }
}

/// Output of a low-rank ensemble run: LR records with errors against a
/// lockstep dense reference, plus the reference's rank history.
#[derive(Debug)]
pub struct FkppRunOutput {
    pub trajectory: TrajectoryRecord,
    pub reference_ranks: Vec<(f64, usize)>,
    pub final_point: FixedRankPoint,
}

/// Low-rank Crank-Nicolson leapfrog for the realization ensemble.
///
/// The ensemble coefficients are drawn from `seed`; a dense reference
/// with the identical draws and bootstrap runs in lockstep, and the L2
/// error against it is recorded at every stored time. Records are kept
/// every `record_stride` time units.
pub fn lr_cnlf_fkpp(
    model: &FkppModel,
    grid: &TimeGrid,
    policy: &RankPolicy,
    rtr: &RtrConfig,
    seed: u64,
    record_stride: f64,
) -> Result<FkppRunOutput> {
    policy.validate()?;
    if grid.n_steps() < 2 {
        return Err(Error::InvalidArgument(
            "the leapfrog needs at least two steps after the bootstrap".into(),
        ));
    }
    let draws = sample_fkpp(seed, model.n_real());
    let w0 = model.initial_condition(&draws)?;
    let stepper = CnlfStepper::new(model.laplacian(), &draws.rates, grid.dt())?;
    let geometry = L2Geometry::Line { h: model.hx() };
    let record_every = stride_steps(grid, record_stride);

    // Dense lockstep state.
    let mut dense_prev = w0.clone();
    let mut dense_cur = stepper.bootstrap(&w0);
    check_cnlf_finite(&dense_cur, 1, grid.time_at(1))?;

    // Low-rank state: identical start, truncated.
    let lr_start = truncate_dense(&w0, policy)?;
    let mut prev_hist = lr_start.to_factored();
    let mut cur_point = truncate_dense(&dense_cur, policy)?;

    let mut trajectory = TrajectoryRecord::new();
    let mut reference_ranks = Vec::new();
    let record = |t: f64,
                  point: &FixedRankPoint,
                  dense: &DMatrix<f64>,
                  solve: Option<SolveSummary>,
                  trajectory: &mut TrajectoryRecord,
                  reference_ranks: &mut Vec<(f64, usize)>|
     -> Result<()> {
        trajectory.push(StepRecord {
            t,
            rank: point.rank(),
            solve,
            error_vs_ref: Some(l2_error(&point.to_dense(), dense, geometry)?),
            l2_rhs_norm: None,
        })?;
        reference_ranks.push((t, numerical_rank(dense, policy.diag_tol)));
        Ok(())
    };
    if record_every == 1 {
        record(
            grid.time_at(1),
            &cur_point,
            &dense_cur,
            None,
            &mut trajectory,
            &mut reference_ranks,
        )?;
    }

    for k in 2..=grid.n_steps() {
        let t = grid.time_at(k);
        // Dense lockstep first; it is the error reference for this level.
        let dense_next = stepper.step(&dense_prev, &dense_cur);
        check_cnlf_finite(&dense_next, k, t)?;
        dense_prev = std::mem::replace(&mut dense_cur, dense_next);

        let cur_hist = cur_point.to_factored();
        let anchor_point = rank_adapt(&cur_point, policy)?;
        let (solved, summary) = solve_step(k - 1, t, &anchor_point, rtr, policy, |anchor| {
            let problem = FkppStepProblem::new(
                model.laplacian(),
                draws.rates.clone(),
                &cur_hist,
                &prev_hist,
                grid.dt(),
            )?;
            let x0: Anchor = Arc::new(anchor.clone());
            rtr_minimize(&problem, x0, rtr)
        })?;
        prev_hist = cur_hist;
        if k % record_every == 0 || k == grid.n_steps() {
            record(t, &solved, &dense_cur, Some(summary), &mut trajectory, &mut reference_ranks)?;
        }
        cur_point = solved;
    }
    Ok(FkppRunOutput { trajectory, reference_ranks, final_point: cur_point })
}

/// Tangent-space norm of the dense implicit-Euler residual
/// W − W̃ − Δt G(W) at a low-rank point; the step energies are built so
/// this vanishes at their minimizers.
pub fn implicit_euler_residual_norm(
    model: &AceModel,
    point: &FixedRankPoint,
    w_prev: &DMatrix<f64>,
    dt: f64,
) -> Result<f64> {
    let w = point.to_dense();
    let residual = &w - w_prev - model.rhs(&w) * dt;
    let anchor: Anchor = Arc::new(point.clone());
    Ok(project_dense(&anchor, &residual)?.norm())
}
