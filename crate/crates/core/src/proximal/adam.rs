use super::{ProxOutcome, ProxRequest, ProxSolver};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamSettings {
    pub iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            iters: 300,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam descent on the prox objective, starting from `u`. Works for any
/// operator that provides `vjp`, which is the only route for nonlinear ones.
pub fn prox_nonlinear(req: &ProxRequest<'_>, cfg: AdamSettings) -> Result<ProxOutcome> {
    let start_objective = req.objective(req.u)?;
    if req.delta == 0.0 {
        return ProxOutcome::exact(req, req.u.clone());
    }
    let scale = req.delta / (req.sigma_n * req.sigma_n);
    let mut x = req.u.clone();
    let mut m = Tensor::zeros(x.shape());
    let mut v = Tensor::zeros(x.shape());
    for it in 1..=cfg.iters {
        let resid = req.op.apply(&x)?.sub(req.y);
        let mut grad = req.op.vjp(&x, &resid)?.scale(scale);
        grad.axpy(1.0, &x.sub(req.u));
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("prox objective gradient at Adam step {it}")));
        }
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        m = m.zip_map(&grad, |mi, gi| b1 * mi + (1.0 - b1) * gi);
        v = v.zip_map(&grad, |vi, gi| b2 * vi + (1.0 - b2) * gi * gi);
        let c1 = 1.0 - b1.powi(it as i32);
        let c2 = 1.0 - b2.powi(it as i32);
        let step = m.zip_map(&v, |mi, vi| cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps));
        x.axpy(-1.0, &step);
    }
    let objective = req.objective(&x)?;
    if !objective.is_finite() {
        return Err(Error::NonFinite("prox objective after Adam".into()));
    }
    Ok(ProxOutcome {
        x,
        objective,
        start_objective,
        residual: None,
        iterations: cfg.iters,
        converged: true,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AdamProx {
    pub settings: AdamSettings,
}

impl ProxSolver for AdamProx {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn solve(&self, req: &ProxRequest<'_>) -> Result<ProxOutcome> {
        prox_nonlinear(req, self.settings)
    }
}
