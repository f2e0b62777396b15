//! Convolution kernels and their constructors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::tensor::Tensor;

/// A 2-D kernel with an origin tap. Kernels built by the constructors here
/// have odd extents and are centered; kernels lifted onto a full periodic
/// grid (see `equiv_hr`) may carry even extents with an explicit origin.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    taps: Tensor,
    origin: (usize, usize),
}

impl ConvKernel {
    pub fn new(taps: Tensor) -> Result<Self> {
        let (kh, kw) = dims2(&taps)?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        Ok(Self {
            taps,
            origin: (kh / 2, kw / 2),
        })
    }

    /// A kernel whose origin tap sits at `origin` rather than the center.
    pub fn with_origin(taps: Tensor, origin: (usize, usize)) -> Result<Self> {
        let (kh, kw) = dims2(&taps)?;
        if origin.0 >= kh || origin.1 >= kw {
            return Err(Error::invalid("kernel origin outside taps"));
        }
        Ok(Self { taps, origin })
    }

    pub fn identity() -> Self {
        Self {
            taps: Tensor::full(&[1, 1], 1.0),
            origin: (0, 0),
        }
    }

    pub fn taps(&self) -> &Tensor {
        &self.taps
    }

    pub fn origin(&self) -> (usize, usize) {
        self.origin
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.taps.shape()[0], self.taps.shape()[1])
    }

    pub fn sum(&self) -> f64 {
        self.taps.sum()
    }

    pub fn is_centered_odd(&self) -> bool {
        let (kh, kw) = self.extents();
        kh % 2 == 1 && kw % 2 == 1 && self.origin == (kh / 2, kw / 2)
    }

    /// Tap at signed offset `(di, dj)` from the origin, zero outside.
    pub fn tap(&self, di: i64, dj: i64) -> f64 {
        let (kh, kw) = self.extents();
        let i = di + self.origin.0 as i64;
        let j = dj + self.origin.1 as i64;
        if i < 0 || j < 0 || i >= kh as i64 || j >= kw as i64 {
            0.0
        } else {
            self.taps.data()[i as usize * kw + j as usize]
        }
    }

    /// Iterate `(di, dj, value)` over all taps.
    pub fn offsets(&self) -> impl Iterator<Item = (i64, i64, f64)> + '_ {
        let (_, kw) = self.extents();
        let (oi, oj) = self.origin;
        self.taps.data().iter().enumerate().map(move |(idx, &v)| {
            (
                (idx / kw) as i64 - oi as i64,
                (idx % kw) as i64 - oj as i64,
                v,
            )
        })
    }

    /// Taps wrapped onto an `h x w` periodic grid with the origin at `(0, 0)`.
    pub fn wrapped(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        let (kh, kw) = self.extents();
        if kh > h || kw > w {
            return Err(Error::invalid(format!(
                "kernel {kh}x{kw} larger than image {h}x{w}"
            )));
        }
        let mut plane = vec![0.0; h * w];
        for (di, dj, v) in self.offsets() {
            let i = di.rem_euclid(h as i64) as usize;
            let j = dj.rem_euclid(w as i64) as usize;
            plane[i * w + j] += v;
        }
        Ok(plane)
    }

    /// DFT of the wrapped kernel on an `h x w` grid.
    pub fn transfer(&self, h: usize, w: usize) -> Result<Vec<Complex64>> {
        let plane = self.wrapped(h, w)?;
        Ok(Fft2::new(h, w).forward_real(&plane))
    }

    /// Kernel with taps mirrored through the origin.
    pub fn flipped(&self) -> ConvKernel {
        let (kh, kw) = self.extents();
        let d = self.taps.data();
        let taps = Tensor::from_fn(&[kh, kw], |idx| {
            let (i, j) = (idx / kw, idx % kw);
            d[(kh - 1 - i) * kw + (kw - 1 - j)]
        });
        ConvKernel {
            taps,
            origin: (kh - 1 - self.origin.0, kw - 1 - self.origin.1),
        }
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(Error::shape(format!("kernel taps must be 2-D, got {s:?}"))),
    }
}

/// Isotropic Gaussian sampled on a `size x size` grid and normalized to sum 1.
pub fn make_gaussian_kernel(size: usize, sigma: f64) -> Result<ConvKernel> {
    if size % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let r = (size / 2) as i64;
    let mut taps: Vec<f64> = Vec::with_capacity(size * size);
    for i in -r..=r {
        for j in -r..=r {
            taps.push((-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|v| *v /= total);
    ConvKernel::new(Tensor::new(vec![size, size], taps)?)
}

/// Continuous path traced by the motion-blur random walk, in pixel units
/// relative to the kernel center.
#[derive(Clone, Debug)]
pub struct MotionPath {
    pub points: Vec<(f64, f64)>,
}

pub const MOTION_STEP: f64 = 0.5;

/// Seeded random walk used by [`make_motion_kernel`].
///
/// The walk takes `size - 1` steps of length [`MOTION_STEP`] (so its arc
/// length is half the kernel width). The heading starts at
/// `pi * intensity * (2u - 1)` with `u ~ U[0,1)` and is perturbed after
/// every step by `intensity * pi/2 * g` with `g ~ N(0,1)`. The path is then
/// shifted so its centroid sits on the kernel center and clamped into the
/// kernel support.
pub fn motion_path(seed: u64, size: usize, intensity: f64) -> Result<MotionPath> {
    if size % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd, got {size}")));
    }
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::invalid(format!(
            "motion intensity must lie in [0,1], got {intensity}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut heading = std::f64::consts::PI * intensity * (2.0 * rng.random::<f64>() - 1.0);
    let mut pos = (0.0_f64, 0.0_f64);
    let mut points = vec![pos];
    for _ in 1..size {
        pos.0 += MOTION_STEP * heading.sin();
        pos.1 += MOTION_STEP * heading.cos();
        points.push(pos);
        let g: f64 = StandardNormal.sample(&mut rng);
        heading += intensity * std::f64::consts::FRAC_PI_2 * g;
    }
    let n = points.len() as f64;
    let (ci, cj) = points
        .iter()
        .fold((0.0, 0.0), |acc, p| (acc.0 + p.0 / n, acc.1 + p.1 / n));
    let r = (size / 2) as f64;
    for p in points.iter_mut() {
        p.0 = (p.0 - ci).clamp(-r, r);
        p.1 = (p.1 - cj).clamp(-r, r);
    }
    Ok(MotionPath { points })
}

/// Motion-blur kernel: the random-walk path of [`motion_path`] splatted
/// bilinearly onto the grid, normalized to sum 1.
pub fn make_motion_kernel(seed: u64, size: usize, intensity: f64) -> Result<ConvKernel> {
    let path = motion_path(seed, size, intensity)?;
    let r = (size / 2) as f64;
    let mut taps = vec![0.0; size * size];
    for &(pi, pj) in &path.points {
        let (fi, fj) = (pi + r, pj + r);
        let (i0, j0) = (fi.floor(), fj.floor());
        let (ai, aj) = (fi - i0, fj - j0);
        for (di, wi) in [(0usize, 1.0 - ai), (1, ai)] {
            for (dj, wj) in [(0usize, 1.0 - aj), (1, aj)] {
                let w = wi * wj;
                if w == 0.0 {
                    continue;
                }
                let i = i0 as usize + di;
                let j = j0 as usize + dj;
                if i < size && j < size {
                    taps[i * size + j] += w;
                }
            }
        }
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|v| *v /= total);
    ConvKernel::new(Tensor::new(vec![size, size], taps)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_basic() {
        let k = make_gaussian_kernel(61, 3.0).unwrap();
        assert_eq!(k.extents(), (61, 61));
        assert!((k.sum() - 1.0).abs() < 1e-12);
        let one = make_gaussian_kernel(1, 0.7).unwrap();
        assert_eq!(one.taps().data(), &[1.0]);
        assert!(make_gaussian_kernel(4, 1.0).is_err());
        assert!(make_gaussian_kernel(5, 0.0).is_err());
    }

    #[test]
    fn gaussian_center_tap_matches_direct_grid() {
        // brute-force: sample exp(-r^2/2s^2) on the 5x5 grid and normalize
        let mut total = 0.0;
        for i in -2i32..=2 {
            for j in -2i32..=2 {
                total += (-((i * i + j * j) as f64) / 2.0).exp();
            }
        }
        let k = make_gaussian_kernel(5, 1.0).unwrap();
        assert!((k.tap(0, 0) - 1.0 / total).abs() < 1e-15);
        // frozen value of the oracle above
        assert!((k.tap(0, 0) - 0.162_102_821_637_126_6).abs() < 1e-12);
    }

    #[test]
    fn motion_straight_when_intensity_zero() {
        let k = make_motion_kernel(3, 15, 0.0).unwrap();
        for (di, _dj, v) in k.offsets() {
            if di != 0 {
                assert_eq!(v, 0.0);
            }
        }
        assert!((k.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn motion_is_deterministic_and_rejects_bad_intensity() {
        let a = make_motion_kernel(11, 31, 0.5).unwrap();
        let b = make_motion_kernel(11, 31, 0.5).unwrap();
        assert_eq!(a.taps().data(), b.taps().data());
        assert!(make_motion_kernel(1, 31, 1.5).is_err());
        assert!(make_motion_kernel(1, 31, -0.1).is_err());
        assert!(a.taps().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn flip_is_involution() {
        let k = make_motion_kernel(5, 9, 0.8).unwrap();
        assert_eq!(k.flipped().flipped(), k);
        assert_eq!(k.flipped().tap(1, -2), k.tap(-1, 2));
    }
}
