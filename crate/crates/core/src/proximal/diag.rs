use super::{ProxOutcome, ProxRequest, ProxSolver};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Prox for pixel masks: observed pixels become
/// `(delta y + sigma² u) / (delta + sigma²)`, unobserved pixels keep `u`.
pub fn prox_diag(req: &ProxRequest<'_>) -> Result<Tensor> {
    let m = req
        .op
        .operator()
        .diagonal()
        .ok_or_else(|| Error::SolverMismatch {
            solver: "diag",
            reason: "operator is not a pixel mask".into(),
        })?;
    let (_, h, w) = req.u.image_dims()?;
    let s2 = req.sigma_n * req.sigma_n;
    let d = req.delta;
    let plane = h * w;
    let (u, y, m) = (req.u.data(), req.y.data(), m.data());
    Ok(Tensor::from_fn(req.u.shape(), |i| {
        let mi = m[i % plane];
        if mi == 0.0 {
            u[i]
        } else {
            (d * mi * y[i] + s2 * u[i]) / (d * mi * mi + s2)
        }
    }))
}

pub struct DiagProx;

impl ProxSolver for DiagProx {
    fn name(&self) -> &'static str {
        "diag"
    }

    fn solve(&self, req: &ProxRequest<'_>) -> Result<ProxOutcome> {
        ProxOutcome::exact(req, prox_diag(req)?)
    }
}
