use rustfft::num_complex::Complex64;

use super::kernel::ConvKernel;
use super::{ForwardOperator, OpKind, SolverHint};
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::tensor::Tensor;

/// Floor on `|h_hat|` used by the regularized spectral pseudoinverse.
pub const PINV_FLOOR: f64 = 1e-3;

/// Circular convolution, applied per channel.
#[derive(Clone, Debug)]
pub struct Conv {
    kernel: ConvKernel,
}

impl Conv {
    pub fn new(kernel: ConvKernel) -> Self {
        Self { kernel }
    }

    pub fn kernel(&self) -> &ConvKernel {
        &self.kernel
    }
}

/// Apply `f(bin_spectrum, transfer)` to every channel of `x` in the Fourier domain.
pub(crate) fn spectral_map(
    x: &Tensor,
    transfer: &[Complex64],
    f: impl Fn(Complex64, Complex64) -> Complex64,
) -> Result<Tensor> {
    let (c, h, w) = x.image_dims()?;
    if transfer.len() != h * w {
        return Err(Error::shape("transfer function does not match image plane"));
    }
    let fft = Fft2::new(h, w);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let mut spec = fft.forward_real(x.channel(ch));
        for (s, &t) in spec.iter_mut().zip(transfer) {
            *s = f(*s, t);
        }
        out.extend(fft.inverse_real(spec));
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn conv_apply(x: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    let (_, h, w) = x.image_dims()?;
    let t = k.transfer(h, w)?;
    spectral_map(x, &t, |s, t| s * t)
}

pub fn conv_adjoint(y: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    let (_, h, w) = y.image_dims()?;
    let t = k.transfer(h, w)?;
    spectral_map(y, &t, |s, t| s * t.conj())
}

/// Spatial-domain circular convolution, `O(n * taps)`.
pub fn conv_apply_direct(x: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    let (c, h, w) = x.image_dims()?;
    let (kh, kw) = k.extents();
    if kh > h || kw > w {
        return Err(Error::invalid(format!(
            "kernel {kh}x{kw} larger than image {h}x{w}"
        )));
    }
    let taps: Vec<_> = k.offsets().filter(|t| t.2 != 0.0).collect();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for &(di, dj, v) in &taps {
                    let si = (i as i64 - di).rem_euclid(h as i64) as usize;
                    let sj = (j as i64 - dj).rem_euclid(w as i64) as usize;
                    acc += v * src[si * w + sj];
                }
                dst[i * w + j] = acc;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

impl ForwardOperator for Conv {
    fn kind(&self) -> OpKind {
        OpKind::Conv
    }

    fn hint(&self) -> SolverHint {
        SolverHint::FreqDiagonal
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            &[_, h, w] => {
                let (kh, kw) = self.kernel.extents();
                if kh > h || kw > w {
                    return Err(Error::invalid(format!(
                        "kernel {kh}x{kw} larger than image {h}x{w}"
                    )));
                }
                Ok(input.to_vec())
            }
            s => Err(Error::shape(format!("expected (C,H,W), got {s:?}"))),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        conv_apply(x, &self.kernel)
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        conv_adjoint(y, &self.kernel)
    }

    /// Spectral division, with `|h_hat|^2` floored at `PINV_FLOOR^2`.
    fn pseudoinverse(&self, y: &Tensor) -> Result<Tensor> {
        let (_, h, w) = y.image_dims()?;
        let t = self.kernel.transfer(h, w)?;
        let floor = PINV_FLOOR * PINV_FLOOR;
        spectral_map(y, &t, |s, t| s * t.conj() / t.norm_sqr().max(floor))
    }

    fn transfer(&self, h: usize, w: usize) -> Option<Result<Vec<Complex64>>> {
        Some(self.kernel.transfer(h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::super::kernel::{make_gaussian_kernel, make_motion_kernel};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_unit(&[2, 8, 8], &mut rng);
        let y = conv_apply(&x, &ConvKernel::identity()).unwrap();
        assert!(y.sub(&x).max_abs() < 1e-12);
    }

    #[test]
    fn constant_image_is_preserved() {
        let k = make_gaussian_kernel(5, 1.3).unwrap();
        let x = Tensor::full(&[1, 16, 16], 0.42);
        let y = conv_apply(&x, &k).unwrap();
        assert!(y.map(|v| v - 0.42).max_abs() < 1e-12);
    }

    #[test]
    fn fft_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = make_motion_kernel(4, 7, 0.6).unwrap();
        for _ in 0..5 {
            let x = Tensor::rand_unit(&[1, 16, 16], &mut rng);
            let a = conv_apply(&x, &k).unwrap();
            let b = conv_apply_direct(&x, &k).unwrap();
            assert!(a.sub(&b).max_abs() < 1e-5);
        }
    }

    #[test]
    fn oversized_kernel_rejected() {
        let k = make_gaussian_kernel(9, 1.0).unwrap();
        let x = Tensor::zeros(&[1, 8, 8]);
        assert!(conv_apply(&x, &k).is_err());
    }
}
