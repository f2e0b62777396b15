use rustfft::num_complex::Complex64;

use super::{ProxOutcome, ProxRequest, ProxSolver};
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::operators::SolverHint;
use crate::tensor::Tensor;

/// Closed-form prox for operators diagonal in the Fourier domain:
/// `x_hat = (delta conj(h) y_hat + sigma² u_hat) / (delta |h|² + sigma²)`.
pub fn prox_freq(req: &ProxRequest<'_>) -> Result<Tensor> {
    let mismatch = |reason: &str| Error::SolverMismatch {
        solver: "freq",
        reason: reason.to_string(),
    };
    if req.op.hint() != SolverHint::FreqDiagonal {
        return Err(mismatch("operator is not diagonal in frequency"));
    }
    if req.delta == 0.0 {
        return Ok(req.u.clone());
    }
    let (c, h, w) = req.u.image_dims()?;
    let transfer = req
        .op
        .operator()
        .transfer(h, w)
        .ok_or_else(|| mismatch("operator exposes no transfer function"))??;
    let fft = Fft2::new(h, w);
    let s2 = req.sigma_n * req.sigma_n;
    let d = req.delta;
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let yh = fft.forward_real(req.y.channel(ch));
        let uh = fft.forward_real(req.u.channel(ch));
        let spec: Vec<Complex64> = transfer
            .iter()
            .zip(yh.iter().zip(&uh))
            .map(|(t, (yv, uv))| (t.conj() * yv * d + uv * s2) / (d * t.norm_sqr() + s2))
            .collect();
        out.extend(fft.inverse_real(spec));
    }
    Tensor::new(vec![c, h, w], out)
}

pub struct FreqProx;

impl ProxSolver for FreqProx {
    fn name(&self) -> &'static str {
        "freq"
    }

    fn solve(&self, req: &ProxRequest<'_>) -> Result<ProxOutcome> {
        ProxOutcome::exact(req, prox_freq(req)?)
    }
}
