//! Fault-tolerant extension of GCR(k): checkpoint of the last known good
//! state, residual-norm fault detection, and restore-with-retry.
//!
//! The checkpoint holds exactly four mesh arrays, [phi, r, p0, L(p0)], taken
//! at the start of a Krylov loop once its first norm check has passed. A
//! detected fault (norm non-decrease, or a non-finite norm) aborts the inner
//! loop, rolls the state back, and retries the outer iteration under the
//! same nominal index, so fully detected faults leave the reported iteration
//! count at the faultless baseline.

use crate::gcr::{
    norm2, run_engine, GcrWorkspace, PrecondHook, SolveConfig, SolveError, SolveReport,
    Supervisor, Verdict,
};
use crate::operators::{Field, LinOp, Precond};
use serde::{Deserialize, Serialize};

/// The "last known good" state: deep copies of the 4 backed-up arrays.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub phi_star: Field,
    pub r_star: Field,
    pub p0_star: Field,
    pub lp0_star: Field,
    /// Outer index the state belongs to.
    pub taken_at: usize,
    /// Residual norm of the stored state; re-seeds the detector after restore.
    pub norm: f64,
}

fn default_restores() -> usize {
    3
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FtPolicy {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Consecutive restores tolerated before detection is suspended until the
    /// next good checkpoint (prevents a detect-restore livelock at stagnation).
    #[serde(default = "default_restores")]
    pub max_consecutive_restores: usize,
    /// Treat NaN/Inf norms as detected faults (a raw >= comparison misses NaN).
    #[serde(default = "default_true")]
    pub nonfinite_is_fault: bool,
}

impl Default for FtPolicy {
    fn default() -> Self {
        FtPolicy {
            enabled: true,
            max_consecutive_restores: 3,
            nonfinite_is_fault: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FtReport {
    #[serde(flatten)]
    pub solve: SolveReport,
    /// Norm checks that flagged a fault.
    pub faults_detected: usize,
    pub restores: usize,
    pub checkpoints_taken: usize,
    /// Guard trips: detection suspended after too many consecutive restores.
    pub undetected_overruns: usize,
}

/// The detection predicate: true iff the norm failed to decrease (the >=
/// comparison is deliberate, equality counts) or went non-finite.
pub fn detect(norm_new: f64, norm_old: f64, policy: &FtPolicy) -> bool {
    if policy.nonfinite_is_fault && !norm_new.is_finite() {
        return true;
    }
    norm_new >= norm_old
}

/// Deep-copies the [phi, r, p0, L(p0)] state of the workspace. Call with the
/// workspace at the top of a Krylov loop (the [.]^0 state).
pub fn take_checkpoint(ws: &GcrWorkspace) -> Checkpoint {
    Checkpoint {
        phi_star: ws.phi.clone(),
        r_star: ws.r.clone(),
        p0_star: ws.p[0].clone(),
        lp0_star: ws.lp[0].clone(),
        taken_at: ws.n,
        norm: norm2(&ws.r),
    }
}

/// Resets the 4 arrays from the checkpoint; the caller aborts the inner loop
/// and retries the outer iteration under the same nominal index.
pub fn restore(ws: &mut GcrWorkspace, ckpt: &Checkpoint) {
    ws.phi.copy_from(&ckpt.phi_star);
    ws.r.copy_from(&ckpt.r_star);
    ws.p[0].copy_from(&ckpt.p0_star);
    ws.lp[0].copy_from(&ckpt.lp0_star);
}

struct FtSupervisor {
    policy: FtPolicy,
    /// Candidate checkpoint captured at the top of the current outer pass.
    staged: Option<Checkpoint>,
    /// Last committed checkpoint.
    good: Option<Checkpoint>,
    detections: usize,
    restores: usize,
    checkpoints_taken: usize,
    undetected_overruns: usize,
    consecutive_restores: usize,
    suspended: bool,
}

impl FtSupervisor {
    fn new(policy: FtPolicy) -> Self {
        FtSupervisor {
            policy,
            staged: None,
            good: None,
            detections: 0,
            restores: 0,
            checkpoints_taken: 0,
            undetected_overruns: 0,
            consecutive_restores: 0,
            suspended: false,
        }
    }
}

impl Supervisor for FtSupervisor {
    fn active(&self) -> bool {
        true
    }

    fn stage(&mut self, ws: &GcrWorkspace) {
        self.staged = Some(take_checkpoint(ws));
    }

    fn check(&mut self, norm_new: f64, norm_prev: f64) -> Verdict {
        if self.suspended {
            return Verdict::Accept;
        }
        if detect(norm_new, norm_prev, &self.policy) {
            if self.consecutive_restores >= self.policy.max_consecutive_restores {
                self.suspended = true;
                self.undetected_overruns += 1;
                return Verdict::Accept;
            }
            self.detections += 1;
            return Verdict::Restore;
        }
        self.consecutive_restores = 0;
        Verdict::Accept
    }

    fn commit(&mut self) {
        self.good = self.staged.take();
        self.checkpoints_taken += 1;
        self.suspended = false;
        self.consecutive_restores = 0;
    }

    fn restore(&mut self, ws: &mut GcrWorkspace) -> f64 {
        self.restores += 1;
        self.consecutive_restores += 1;
        match &self.good {
            Some(ckpt) => {
                restore(ws, ckpt);
                ckpt.norm
            }
            None => {
                // fault before the first checkpoint: the staged state at the
                // top of the first pass is the initial state
                let ckpt = self
                    .staged
                    .as_ref()
                    .expect("staged state exists once the outer loop started");
                restore(ws, ckpt);
                ckpt.norm
            }
        }
    }
}

/// FT-GCR(k): the full algorithm with the red-section logic interleaved in
/// printed order (exit check, fault check, checkpoint at nu = 0, then
/// preconditioner + hook).
pub fn ftgcr_solve<O: LinOp + ?Sized, P: Precond + ?Sized>(
    op: &O,
    precond: &P,
    rhs: &Field,
    phi0: &Field,
    cfg: &SolveConfig,
    policy: &FtPolicy,
    hook: &mut dyn PrecondHook,
) -> Result<FtReport, SolveError> {
    if !policy.enabled {
        let solve = run_engine(op, precond, rhs, phi0, cfg, &mut crate::gcr::NoSupervision, hook)?;
        return Ok(FtReport {
            solve,
            faults_detected: 0,
            restores: 0,
            checkpoints_taken: 0,
            undetected_overruns: 0,
        });
    }
    let mut sup = FtSupervisor::new(policy.clone());
    let solve = run_engine(op, precond, rhs, phi0, cfg, &mut sup, hook)?;
    Ok(FtReport {
        solve,
        faults_detected: sup.detections,
        restores: sup.restores,
        checkpoints_taken: sup.checkpoints_taken,
        undetected_overruns: sup.undetected_overruns,
    })
}
