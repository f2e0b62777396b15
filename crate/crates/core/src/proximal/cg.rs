use super::{ProxOutcome, ProxRequest, ProxSolver};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CG_DEFAULT_TOL: f64 = 1e-8;
pub const CG_DEFAULT_MAX_ITER: usize = 500;

/// Conjugate gradients on the normal equations, started from `u`.
///
/// No preconditioner is applied; `sigma² I` keeps the system positive
/// definite. Hitting `max_iter` returns the last iterate with
/// `converged = false` and logs a warning.
pub fn prox_cg(req: &ProxRequest<'_>, tol: f64, max_iter: usize) -> Result<ProxOutcome> {
    if !req.op.is_linear() {
        return Err(Error::NonlinearOperator("conjugate-gradient prox"));
    }
    let start_objective = req.objective(req.u)?;
    let rhs = req.normal_rhs()?;
    let rhs_norm = rhs.norm();
    let mut x = req.u.clone();
    if rhs_norm == 0.0 {
        x = Tensor::zeros(req.u.shape());
    }
    let mut r = rhs.sub(&req.normal_apply(&x)?);
    let mut p = r.clone();
    let mut rs = r.norm_sq();
    let rel = |rs: f64| if rhs_norm > 0.0 { rs.sqrt() / rhs_norm } else { rs.sqrt() };
    let mut iterations = 0;
    while rel(rs) > tol && iterations < max_iter {
        let ap = req.normal_apply(&p)?;
        let alpha = rs / p.dot(&ap);
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rs_new = r.norm_sq();
        let beta = rs_new / rs;
        p = r.zip_map(&p, |ri, pi| ri + beta * pi);
        rs = rs_new;
        iterations += 1;
    }
    let residual = req.normal_residual(&x)?;
    let converged = residual <= tol || rel(rs) <= tol;
    if !converged {
        log::warn!(
            "prox_cg stopped after {iterations} iterations at relative residual {residual:.3e} (tol {tol:.1e})"
        );
    }
    Ok(ProxOutcome {
        objective: req.objective(&x)?,
        start_objective,
        x,
        residual: Some(residual),
        iterations,
        converged,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct CgProx {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgProx {
    fn default() -> Self {
        Self {
            tol: CG_DEFAULT_TOL,
            max_iter: CG_DEFAULT_MAX_ITER,
        }
    }
}

impl ProxSolver for CgProx {
    fn name(&self) -> &'static str {
        "cg"
    }

    fn solve(&self, req: &ProxRequest<'_>) -> Result<ProxOutcome> {
        prox_cg(req, self.tol, self.max_iter)
    }
}
