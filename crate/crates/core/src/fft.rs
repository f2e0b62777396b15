//! Two-dimensional FFT helpers over `(H, W)` planes.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn run(&self, buf: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        assert_eq!(buf.len(), self.h * self.w);
        for row in buf.chunks_exact_mut(self.w) {
            rows.process(row);
        }
        let mut col = vec![Complex64::default(); self.h];
        for j in 0..self.w {
            for i in 0..self.h {
                col[i] = buf[i * self.w + j];
            }
            cols.process(&mut col);
            for i in 0..self.h {
                buf[i * self.w + j] = col[i];
            }
        }
    }

    /// Unnormalized forward DFT, in place.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    /// Normalized inverse DFT (divides by `H*W`), in place.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_inv, &self.col_inv);
        let s = 1.0 / (self.h * self.w) as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }

    pub fn forward_real(&self, plane: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Inverse transform keeping the real part.
    pub fn inverse_real(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.inverse(&mut spec);
        spec.into_iter().map(|c| c.re).collect()
    }
}

/// Signed frequency index of DFT bin `k` on an `n`-point grid, in `[-n/2, n/2)`.
pub fn signed_freq(k: usize, n: usize) -> i64 {
    let k = k as i64;
    let n = n as i64;
    if k >= (n + 1) / 2 {
        k - n
    } else {
        k
    }
}
