//! Restarted generalized conjugate residual solver GCR(k).
//!
//! Each inner step picks the coefficient that minimizes ||r + beta L(p)||_2,
//! so the residual norm is non-increasing across inner steps and, because the
//! Krylov subspaces are nested, across outer iterations as well. That
//! monotonicity is the property the fault detector in `ftgcr` keys on.
//!
//! All reductions are fixed-order serial sums: two solves with identical
//! inputs produce bitwise-identical residual histories.

use crate::operators::{Field, LinOp, Precond, PreconditionerSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: operator size {op}, rhs {rhs}, initial guess {phi0}")]
    ShapeMismatch { op: usize, rhs: usize, phi0: usize },
    #[error("numerical breakdown: <L(p), L(p)> vanished at outer {n}, inner {nu}")]
    Breakdown { n: usize, nu: usize },
    #[error("non-finite residual norm at outer {n}, inner {nu}")]
    NonFiniteResidual { n: usize, nu: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TolMode {
    /// Exit when ||r||_2 <= tol.
    #[default]
    Absolute,
    /// Exit when ||r||_2 <= tol * ||R||_2.
    Relative,
}

fn default_k() -> usize {
    5
}
fn default_max_outer() -> usize {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveConfig {
    /// Krylov space size.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Exit threshold on the residual l2 norm.
    pub tol: f64,
    #[serde(default)]
    pub tol_mode: TolMode,
    /// Cap on outer iterations.
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default)]
    pub preconditioner: PreconditionerSpec,
}

impl SolveConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if self.k < 1 {
            return Err(SolveError::InvalidConfig("k must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(SolveError::InvalidConfig("tol must be > 0".into()));
        }
        if self.max_outer < 1 {
            return Err(SolveError::InvalidConfig("max_outer must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fixed-order (index-ordered) dot product; bitwise deterministic.
pub fn dot(a: &Field, b: &Field) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        acc += x * y;
    }
    acc
}

/// l2 norm with the same fixed-order summation.
pub fn norm2(a: &Field) -> f64 {
    dot(a, a).sqrt()
}

/// The residual-minimizing step coefficient, beta = -<r, Lp>/<Lp, Lp>.
pub fn beta_coefficient(r: &Field, lp: &Field) -> Result<f64, SolveError> {
    let denom = dot(lp, lp);
    if denom == 0.0 {
        return Err(SolveError::Breakdown { n: 0, nu: 0 });
    }
    Ok(-dot(r, lp) / denom)
}

/// Orthogonalizes (e, Le) against the current direction images, returning
/// the next direction pair. Lp_new stays the image of p_new because both
/// receive the same combination (no extra operator application).
pub fn orthogonalize(
    e: &Field,
    le: &Field,
    basis: &[Field],
    images: &[Field],
) -> Result<(Field, Field), SolveError> {
    assert_eq!(basis.len(), images.len());
    let mut p_new = e.clone();
    let mut lp_new = le.clone();
    for (p_l, lp_l) in basis.iter().zip(images) {
        let denom = dot(lp_l, lp_l);
        if denom == 0.0 {
            return Err(SolveError::Breakdown { n: 0, nu: 0 });
        }
        let alpha = -dot(le, lp_l) / denom;
        p_new.axpy(alpha, p_l);
        lp_new.axpy(alpha, lp_l);
    }
    Ok((p_new, lp_new))
}

/// Solver state: the iterate, residual, and the direction stack p / L(p).
/// Slot k holds the direction produced by the nu = k-1 pass, which seeds the
/// next outer iteration.
pub struct GcrWorkspace {
    pub phi: Field,
    pub r: Field,
    pub p: Vec<Field>,
    pub lp: Vec<Field>,
    /// outer counter
    pub n: usize,
    /// inner counter
    pub nu: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    /// Nominal outer count at exit (restores do not advance it).
    pub outer_iterations: usize,
    /// Total inner passes executed, including redone work.
    pub inner_steps: usize,
    pub operator_applications: usize,
    /// ||r||_2 at entry and after every inner step.
    pub residual_history: Vec<f64>,
    pub final_residual: f64,
}

/// Observes every post-preconditioner vector; the fault injector lives here.
pub trait PrecondHook {
    /// Called once per inner-loop preconditioner application (the initial
    /// p0 = P^-1(r0) is not eligible). May mutate `e`.
    fn on_preconditioned(&mut self, n: usize, nu: usize, e: &mut Field);
    /// A restore discarded all state back to the last checkpoint.
    fn on_restore(&mut self) {}
    /// A checkpoint committed; prior corruption is now absorbed.
    fn on_checkpoint(&mut self) {}
}

/// Hook that leaves the preconditioner output untouched.
pub struct InertHook;

impl PrecondHook for InertHook {
    fn on_preconditioned(&mut self, _n: usize, _nu: usize, _e: &mut Field) {}
}

pub enum Verdict {
    Accept,
    Restore,
}

/// The seam the fault-tolerant layer plugs into. The default implementation
/// is a no-op supervisor: plain GCR.
pub trait Supervisor {
    /// Whether the red-section logic is live (controls non-finite handling).
    fn active(&self) -> bool {
        false
    }
    /// Top of an outer iteration: the workspace holds the [.]^0 state.
    fn stage(&mut self, _ws: &GcrWorkspace) {}
    /// Norm check, applied after the exit check.
    fn check(&mut self, _norm_new: f64, _norm_prev: f64) -> Verdict {
        Verdict::Accept
    }
    /// Accepted nu = 0 step: promote the staged state to the checkpoint.
    fn commit(&mut self) {}
    /// Roll the workspace back; returns the residual norm of the restored state.
    fn restore(&mut self, _ws: &mut GcrWorkspace) -> f64 {
        unreachable!("no-op supervisor never restores")
    }
}

pub struct NoSupervision;

impl Supervisor for NoSupervision {}

/// Shared engine: Algorithm body for both GCR (no-op supervisor) and FT-GCR.
pub(crate) fn run_engine<O: LinOp + ?Sized, P: Precond + ?Sized>(
    op: &O,
    precond: &P,
    rhs: &Field,
    phi0: &Field,
    cfg: &SolveConfig,
    sup: &mut dyn Supervisor,
    hook: &mut dyn PrecondHook,
) -> Result<SolveReport, SolveError> {
    cfg.validate()?;
    let n_pts = op.len();
    if rhs.len() != n_pts || phi0.len() != n_pts {
        return Err(SolveError::ShapeMismatch {
            op: n_pts,
            rhs: rhs.len(),
            phi0: phi0.len(),
        });
    }
    let eps = match cfg.tol_mode {
        TolMode::Absolute => cfg.tol,
        TolMode::Relative => cfg.tol * norm2(rhs),
    };
    let k = cfg.k;

    let mut ws = GcrWorkspace {
        phi: phi0.clone(),
        r: Field::zeros(n_pts),
        p: (0..=k).map(|_| Field::zeros(n_pts)).collect(),
        lp: (0..=k).map(|_| Field::zeros(n_pts)).collect(),
        n: 0,
        nu: 0,
    };

    let mut op_apps = 0usize;
    let mut inner_steps = 0usize;
    let mut history = Vec::new();

    // r0 = L(phi0) - R
    op.apply(&ws.phi, &mut ws.r);
    op_apps += 1;
    ws.r.axpy(-1.0, rhs);
    let mut norm = norm2(&ws.r);
    history.push(norm);

    let report = |converged: bool, outer: usize, inner: usize, apps: usize, hist: Vec<f64>| {
        let last = *hist.last().unwrap();
        SolveReport {
            converged,
            outer_iterations: outer,
            inner_steps: inner,
            operator_applications: apps,
            residual_history: hist,
            final_residual: last,
        }
    };

    if norm <= eps {
        return Ok(report(true, 0, 0, op_apps, history));
    }
    if !norm.is_finite() {
        return Err(SolveError::NonFiniteResidual { n: 0, nu: 0 });
    }

    // p0 = P^-1(r0); the hook is not invoked here
    precond.apply(&ws.r, &mut ws.p[0]);
    op.apply(&ws.p[0], &mut ws.lp[0]);
    op_apps += 1;

    let mut last_norm = norm;
    let mut e = Field::zeros(n_pts);
    let mut le = Field::zeros(n_pts);

    ws.n = 1;
    while ws.n <= cfg.max_outer {
        sup.stage(&ws);
        let mut restored = false;
        for nu in 0..k {
            ws.nu = nu;
            let beta = match beta_coefficient(&ws.r, &ws.lp[nu]) {
                Ok(b) => b,
                Err(_) => {
                    // lucky breakdown if already at tolerance
                    if norm2(&ws.r) <= eps {
                        return Ok(report(true, ws.n, inner_steps, op_apps, history));
                    }
                    return Err(SolveError::Breakdown { n: ws.n, nu });
                }
            };
            ws.phi.axpy(beta, &ws.p[nu]);
            ws.r.axpy(beta, &ws.lp[nu]);
            inner_steps += 1;
            norm = norm2(&ws.r);
            history.push(norm);

            // exit check precedes the fault check
            if norm.is_finite() && norm <= eps {
                return Ok(report(true, ws.n, inner_steps, op_apps, history));
            }

            match sup.check(norm, last_norm) {
                Verdict::Restore => {
                    last_norm = sup.restore(&mut ws);
                    hook.on_restore();
                    restored = true;
                    break;
                }
                Verdict::Accept => {
                    if !norm.is_finite() && !sup.active() {
                        return Err(SolveError::NonFiniteResidual { n: ws.n, nu });
                    }
                    if nu == 0 {
                        sup.commit();
                        hook.on_checkpoint();
                    }
                }
            }
            last_norm = norm;

            // e = P^-1(r), corrupted by the hook if a fault fires here
            precond.apply(&ws.r, &mut e);
            hook.on_preconditioned(ws.n, nu, &mut e);
            op.apply(&e, &mut le);
            op_apps += 1;

            // orthogonalize against L(p^0..nu); p[nu+1] mirrors the same
            // combination so it stays consistent with its image
            let (p_new, lp_new) = orthogonalize(&e, &le, &ws.p[..=nu], &ws.lp[..=nu])
                .map_err(|_| SolveError::Breakdown { n: ws.n, nu })?;
            ws.p[nu + 1] = p_new;
            ws.lp[nu + 1] = lp_new;
        }
        if restored {
            // the retried pass keeps the same nominal n ("n = n - 1")
            continue;
        }
        // reset [.]^k to [.]^0 for the next Krylov subspace
        ws.p.swap(0, k);
        ws.lp.swap(0, k);
        ws.n += 1;
    }

    Ok(report(false, cfg.max_outer, inner_steps, op_apps, history))
}

/// Plain GCR(k): Algorithm 1 without the fault-tolerance section. The hook
/// still sees every inner-loop preconditioner output, which is where the
/// fault model injects for the unprotected runs.
pub fn gcr_solve<O: LinOp + ?Sized, P: Precond + ?Sized>(
    op: &O,
    precond: &P,
    rhs: &Field,
    phi0: &Field,
    cfg: &SolveConfig,
    hook: &mut dyn PrecondHook,
) -> Result<SolveReport, SolveError> {
    run_engine(op, precond, rhs, phi0, cfg, &mut NoSupervision, hook)
}
