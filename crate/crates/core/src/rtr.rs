//! Riemannian trust-region solver on the fixed-rank manifold with a
//! truncated-CG inner loop and an optional exact model preconditioner.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::factored::FactoredMatrix;
use crate::manifold::{project, retract, Anchor, TangentVector};
use crate::precond::{build_context, PrecondContext, SylvesterOperator, DEFAULT_RANK_CAP};

/// Problem interface consumed by [`rtr_minimize`].
///
/// `hess_apply` must be linear and self-adjoint in the tangent metric;
/// it is the model operator the inner CG loop works with (the projected
/// ambient second derivative for the bundled problems).
pub trait RtrProblem {
    fn cost(&self, x: &Anchor) -> Result<f64>;

    /// Ambient gradient in factored form; the solver projects it.
    fn euclid_grad(&self, x: &Anchor) -> Result<FactoredMatrix>;

    fn hess_apply(&self, x: &Anchor, xi: &TangentVector) -> Result<TangentVector>;

    /// Operator whose projected inverse preconditions the inner loop.
    fn precond_operator(&self) -> Option<&SylvesterOperator> {
        None
    }
}

/// Trust-region radius ceiling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaBar {
    /// sqrt of the manifold dimension; a scale-free substitute for a
    /// problem-specific ceiling.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct RtrConfig {
    pub delta_bar: DeltaBar,
    /// Initial radius; defaults to delta_bar / 8.
    pub delta0: Option<f64>,
    /// Acceptance threshold on the decrease ratio.
    pub rho_accept: f64,
    /// Expansion threshold; radius grows only on boundary-limited steps.
    pub rho_expand: f64,
    /// Shrink threshold; radius collapses onto the rejected step length.
    pub rho_shrink: f64,
    pub expand_factor: f64,
    pub shrink_factor: f64,
    /// Absolute tolerance on the Riemannian gradient norm.
    pub grad_tol: f64,
    pub max_outer: usize,
    /// Total inner-iteration budget, checked between inner solves; the
    /// run stops once the tally first exceeds it.
    pub max_total_inner: usize,
    pub tcg_kappa: f64,
    pub tcg_theta: f64,
    /// Per-call inner iteration cap; defaults to the manifold dimension.
    pub tcg_max_inner: Option<usize>,
    /// Numerator/denominator regularization for the decrease ratio,
    /// in units of machine epsilons of the cost scale. Guards the
    /// accept/reject decision once both decreases sit at roundoff;
    /// 0 disables it.
    pub rho_regularization: f64,
    /// Use the problem's preconditioner when it provides one.
    pub use_precond: bool,
    pub precond_rank_cap: usize,
}

impl Default for RtrConfig {
    fn default() -> Self {
        Self {
            delta_bar: DeltaBar::Auto,
            delta0: None,
            rho_accept: 0.05,
            rho_expand: 0.75,
            rho_shrink: 0.25,
            expand_factor: 2.0,
            shrink_factor: 0.25,
            grad_tol: 1e-9,
            max_outer: 200,
            max_total_inner: 8000,
            tcg_kappa: 0.1,
            tcg_theta: 1.0,
            tcg_max_inner: None,
            rho_regularization: 1e3,
            use_precond: true,
            precond_rank_cap: DEFAULT_RANK_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcgStop {
    SmallResidual,
    NegativeCurvature,
    Boundary,
    MaxInner,
    /// A candidate update failed to decrease the model value: the
    /// iteration has reached the roundoff floor, so the accumulated
    /// step is the best available.
    Stagnated,
}

impl TcgStop {
    pub fn as_str(&self) -> &'static str {
        match self {
            TcgStop::SmallResidual => "small_residual",
            TcgStop::NegativeCurvature => "negative_curvature",
            TcgStop::Boundary => "boundary",
            TcgStop::MaxInner => "max_inner",
            TcgStop::Stagnated => "stagnated",
        }
    }

    /// Whether the returned step sits on the trust-region boundary.
    pub fn hit_boundary(&self) -> bool {
        matches!(self, TcgStop::NegativeCurvature | TcgStop::Boundary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxOuterReached,
    InnerBudgetExhausted,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::MaxOuterReached => "max_outer",
            StopReason::InnerBudgetExhausted => "inner_budget",
        }
    }
}

/// One outer iteration, recorded at the state it started from.
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub k: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub delta: f64,
    pub n_inner: usize,
    pub tcg_stop: TcgStop,
    pub rho: f64,
    pub accepted: bool,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct RtrReport {
    pub point: Anchor,
    pub stop: StopReason,
    pub iterations: Vec<IterRecord>,
    pub n_outer: usize,
    pub total_inner: usize,
    pub final_cost: f64,
    pub final_grad_norm: f64,
    /// Relative gradient norm per outer iteration, starting at 1; one
    /// trailing entry for the final point.
    pub rgrad_history: Vec<f64>,
}

/// Result of one truncated-CG solve of the trust-region subproblem.
pub struct TcgOutcome {
    pub eta: TangentVector,
    pub stop: TcgStop,
    pub n_inner: usize,
    /// Model value m(η_j) after every accepted inner update; strictly
    /// decreasing up to roundoff.
    pub model_values: Vec<f64>,
}

/// Steihaug-Toint truncated CG on the tangent space at `grad`'s anchor.
/// The trust-region constraint uses the plain tangent norm; the
/// preconditioner only reshapes the search directions.
#[allow(clippy::too_many_arguments)]
pub fn tcg_solve<P: RtrProblem>(
    problem: &P,
    x: &Anchor,
    grad: &TangentVector,
    delta: f64,
    kappa: f64,
    theta: f64,
    max_inner: usize,
    precond: Option<&PrecondContext>,
) -> Result<TcgOutcome> {
    let mut eta = TangentVector::zero(x.clone());
    let mut h_eta = TangentVector::zero(x.clone());
    let mut r = grad.clone();
    let z0 = match precond {
        Some(ctx) => ctx.apply(&r)?,
        None => r.clone(),
    };
    let mut rz = r.inner(&z0)?;
    if rz <= 0.0 {
        return Err(Error::Solver(format!(
            "preconditioner is not positive definite on the gradient: <g, P g> = {rz}"
        )));
    }
    let mut delta_dir = z0.scale(-1.0);
    let r0_norm = grad.norm();
    let target = r0_norm * kappa.min(r0_norm.powf(theta));
    let mut model_values = Vec::new();
    let mut n_inner = 0;
    // Last accepted model value; m(0) = 0. Every candidate must
    // strictly decrease it. A candidate that fails this certifies the
    // iteration is dominated by roundoff (in exact arithmetic tCG
    // decreases the model monotonically), so the accumulated step is
    // returned instead of the candidate.
    let mut model = 0.0;

    for _ in 0..max_inner {
        let h_delta = problem.hess_apply(x, &delta_dir)?;
        n_inner += 1;
        let d_hd = delta_dir.inner(&h_delta)?;
        if !d_hd.is_finite() {
            return Err(Error::NonFinite("model curvature"));
        }
        if d_hd <= 0.0 {
            let tau = boundary_step(&eta, &delta_dir, delta)?;
            let eta_b = eta.add_scaled(&delta_dir, tau)?;
            let h_eta_b = h_eta.add_scaled(&h_delta, tau)?;
            let m_b = model_value(grad, &eta_b, &h_eta_b)?;
            if !(m_b < model) {
                return Ok(TcgOutcome { eta, stop: TcgStop::Stagnated, n_inner, model_values });
            }
            model_values.push(m_b);
            return Ok(TcgOutcome {
                eta: eta_b,
                stop: TcgStop::NegativeCurvature,
                n_inner,
                model_values,
            });
        }
        let alpha = rz / d_hd;
        let eta_new = eta.add_scaled(&delta_dir, alpha)?;
        if eta_new.norm() >= delta {
            let tau = boundary_step(&eta, &delta_dir, delta)?;
            let eta_b = eta.add_scaled(&delta_dir, tau)?;
            let h_eta_b = h_eta.add_scaled(&h_delta, tau)?;
            let m_b = model_value(grad, &eta_b, &h_eta_b)?;
            if !(m_b < model) {
                return Ok(TcgOutcome { eta, stop: TcgStop::Stagnated, n_inner, model_values });
            }
            model_values.push(m_b);
            return Ok(TcgOutcome { eta: eta_b, stop: TcgStop::Boundary, n_inner, model_values });
        }
        let h_eta_new = h_eta.add_scaled(&h_delta, alpha)?;
        let m_new = model_value(grad, &eta_new, &h_eta_new)?;
        if !(m_new < model) {
            return Ok(TcgOutcome { eta, stop: TcgStop::Stagnated, n_inner, model_values });
        }
        eta = eta_new;
        h_eta = h_eta_new;
        model = m_new;
        model_values.push(m_new);
        r = r.add_scaled(&h_delta, alpha)?;
        let r_norm = r.norm();
        if !r_norm.is_finite() {
            return Err(Error::NonFinite("inner residual"));
        }
        if r_norm <= target {
            return Ok(TcgOutcome { eta, stop: TcgStop::SmallResidual, n_inner, model_values });
        }
        let z_new = match precond {
            Some(ctx) => ctx.apply(&r)?,
            None => r.clone(),
        };
        let rz_new = r.inner(&z_new)?;
        if rz_new <= 0.0 {
            // The preconditioned product of a genuine residual is positive;
            // CG has driven the residual down to roundoff (an exact
            // preconditioner collapses it in one step), so the accumulated
            // step is the converged inner solution.
            return Ok(TcgOutcome { eta, stop: TcgStop::SmallResidual, n_inner, model_values });
        }
        let beta = rz_new / rz;
        delta_dir = delta_dir.scale(beta).add_scaled(&z_new, -1.0)?;
        rz = rz_new;
    }
    Ok(TcgOutcome { eta, stop: TcgStop::MaxInner, n_inner, model_values })
}

/// m(η) = ⟨g, η⟩ + ½⟨η, Hη⟩ with Hη maintained incrementally.
fn model_value(grad: &TangentVector, eta: &TangentVector, h_eta: &TangentVector) -> Result<f64> {
    Ok(grad.inner(eta)? + 0.5 * eta.inner(h_eta)?)
}

/// Positive root of ‖η + τδ‖ = Δ.
fn boundary_step(eta: &TangentVector, dir: &TangentVector, delta: f64) -> Result<f64> {
    let a = dir.inner(dir)?;
    let b = 2.0 * eta.inner(dir)?;
    let c = eta.inner(eta)? - delta * delta;
    if a <= 0.0 {
        return Err(Error::Solver("degenerate inner direction".into()));
    }
    let disc = (b * b - 4.0 * a * c).max(0.0);
    Ok((-b + disc.sqrt()) / (2.0 * a))
}

/// Minimizes `problem` from `x0` by the preconditioned Riemannian
/// trust-region method.
pub fn rtr_minimize<P: RtrProblem>(
    problem: &P,
    x0: Anchor,
    config: &RtrConfig,
) -> Result<RtrReport> {
    validate_config(config)?;
    let dim = x0.manifold_dim();
    let delta_bar = match config.delta_bar {
        DeltaBar::Auto => (dim as f64).sqrt(),
        DeltaBar::Fixed(v) => v,
    };
    let mut delta = config.delta0.unwrap_or(delta_bar / 8.0);
    if !(delta > 0.0 && delta <= delta_bar) {
        return Err(Error::InvalidArgument(format!(
            "initial radius {delta} outside (0, {delta_bar}]"
        )));
    }
    let tcg_max_inner = config.tcg_max_inner.unwrap_or(dim).max(1);

    let mut x = x0;
    let mut cost = problem.cost(&x)?;
    check_finite(cost, "cost")?;
    let mut grad = riemannian_grad(problem, &x)?;
    let mut grad_norm = grad.norm();
    let grad0_norm = grad_norm;

    let mut iterations = Vec::new();
    let mut rgrad_history = vec![1.0];
    let mut total_inner = 0usize;
    let mut stop = StopReason::MaxOuterReached;

    if grad_norm <= config.grad_tol {
        return Ok(RtrReport {
            point: x,
            stop: StopReason::Converged,
            iterations,
            n_outer: 0,
            total_inner: 0,
            final_cost: cost,
            final_grad_norm: grad_norm,
            rgrad_history,
        });
    }

    for k in 0..config.max_outer {
        let ctx = match (config.use_precond, problem.precond_operator()) {
            (true, Some(op)) => Some(build_context(op, &x, config.precond_rank_cap)?),
            _ => None,
        };
        let out = tcg_solve(
            problem,
            &x,
            &grad,
            delta,
            config.tcg_kappa,
            config.tcg_theta,
            tcg_max_inner,
            ctx.as_ref(),
        )?;
        total_inner += out.n_inner;
        let eta = out.eta;
        let step_norm = eta.norm();

        // Predicted decrease evaluated with a fresh model application,
        // not the incrementally accumulated one.
        let h_eta = problem.hess_apply(&x, &eta)?;
        let pred = -(grad.inner(&eta)? + 0.5 * eta.inner(&h_eta)?);
        let trial: Anchor = Arc::new(retract(&x, &eta)?);
        let trial_cost = problem.cost(&trial)?;
        check_finite(trial_cost, "cost")?;
        let ared = cost - trial_cost;
        let reg = config.rho_regularization * f64::EPSILON * cost.abs().max(1.0);
        let denom = pred + reg;
        // A non-positive denominator means even the regularized model
        // predicts no decrease; treat the step as a plain rejection so
        // the radius shrinks instead of aborting the run.
        let rho = if denom > 0.0 { (ared + reg) / denom } else { f64::NEG_INFINITY };
        let accepted = rho >= config.rho_accept;

        iterations.push(IterRecord {
            k,
            cost,
            grad_norm,
            delta,
            n_inner: out.n_inner,
            tcg_stop: out.stop,
            rho,
            accepted,
            step_norm,
        });

        if accepted {
            x = trial;
            cost = trial_cost;
            grad = riemannian_grad(problem, &x)?;
            grad_norm = grad.norm();
        }
        rgrad_history.push(grad_norm / grad0_norm);

        // Radius update: expand only boundary-limited, well-modeled
        // steps; collapse onto the step length when the model misfits.
        if rho >= config.rho_expand && out.stop.hit_boundary() {
            delta = (config.expand_factor * delta).min(delta_bar);
        } else if rho <= config.rho_shrink {
            delta = config.shrink_factor * step_norm;
        }

        if grad_norm <= config.grad_tol {
            stop = StopReason::Converged;
            break;
        }
        if total_inner > config.max_total_inner {
            stop = StopReason::InnerBudgetExhausted;
            break;
        }
    }

    let n_outer = iterations.len();
    Ok(RtrReport {
        point: x,
        stop,
        iterations,
        n_outer,
        total_inner,
        final_cost: cost,
        final_grad_norm: grad_norm,
        rgrad_history,
    })
}

fn riemannian_grad<P: RtrProblem>(problem: &P, x: &Anchor) -> Result<TangentVector> {
    let eg = problem.euclid_grad(x)?;
    let g = project(x, &eg)?;
    if !g.norm().is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(g)
}

fn check_finite(v: f64, what: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn validate_config(c: &RtrConfig) -> Result<()> {
    let positive = [
        ("rho_accept", c.rho_accept),
        ("expand_factor", c.expand_factor),
        ("shrink_factor", c.shrink_factor),
        ("grad_tol", c.grad_tol),
        ("tcg_kappa", c.tcg_kappa),
        ("tcg_theta", c.tcg_theta),
    ];
    for (name, v) in positive {
        if !(v > 0.0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
        }
    }
    if c.rho_shrink >= c.rho_expand {
        return Err(Error::InvalidArgument("rho_shrink must be below rho_expand".into()));
    }
    if let DeltaBar::Fixed(v) = c.delta_bar {
        if !(v > 0.0) {
            return Err(Error::InvalidArgument(format!("delta_bar must be positive, got {v}")));
        }
    }
    if c.rho_regularization < 0.0 {
        return Err(Error::InvalidArgument("rho_regularization must be nonnegative".into()));
    }
    Ok(())
}
