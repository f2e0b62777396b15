use rustfft::num_complex::Complex64;

use super::{ForwardOperator, OpKind, SolverHint};
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::tensor::Tensor;

/// Fourier phase retrieval: `A(x) = |DFT(x)|` on a single-channel image.
#[derive(Clone, Copy, Debug)]
pub struct PhaseRetrieval;

fn single_channel(x: &Tensor) -> Result<(usize, usize)> {
    match x.image_dims()? {
        (1, h, w) => Ok((h, w)),
        (c, _, _) => Err(Error::shape(format!(
            "phase retrieval expects one channel, got {c}"
        ))),
    }
}

pub fn phase_retrieval_apply(x: &Tensor) -> Result<Tensor> {
    let (h, w) = single_channel(x)?;
    let spec = Fft2::new(h, w).forward_real(x.data());
    Tensor::new(vec![1, h, w], spec.iter().map(|c| c.norm()).collect())
}

impl ForwardOperator for PhaseRetrieval {
    fn kind(&self) -> OpKind {
        OpKind::PhaseRetrieval
    }

    fn hint(&self) -> SolverHint {
        SolverHint::Nonlinear
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            &[1, _, _] => Ok(input.to_vec()),
            s => Err(Error::shape(format!(
                "phase retrieval expects (1,H,W), got {s:?}"
            ))),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        phase_retrieval_apply(x)
    }

    /// `Re(F^H (g * X/|X|))`, with the phase taken as 0 where `|X| = 0`.
    fn vjp(&self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        let (h, w) = single_channel(x)?;
        x.same_shape(g)?;
        let fft = Fft2::new(h, w);
        let mut spec = fft.forward_real(x.data());
        for (s, &gv) in spec.iter_mut().zip(g.data()) {
            let m = s.norm();
            *s = if m > 0.0 { *s * (gv / m) } else { Complex64::default() };
        }
        // F^H = (H*W) * normalized inverse
        let n = (h * w) as f64;
        let back = fft.inverse_real(spec);
        Tensor::new(vec![1, h, w], back.into_iter().map(|v| v * n).collect())
    }
}
