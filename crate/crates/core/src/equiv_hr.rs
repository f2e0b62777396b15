//! Equivalent high-resolution transformations.
//!
//! An alias-free subsampling operator `S_s(X) = ↓_s(h_s ∗ X)` band-limits an
//! image to `[-π/s, π/s]²` before decimation. A low-resolution kernel `h`
//! can then be lifted to a high-resolution kernel `H` with
//! `S_s(X) ∗ h == S_s(X ∗ H)`, which lets a blur-after-downsampling problem be
//! solved as a downsampling-after-blur problem. All images are periodic.

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{signed_freq, Fft2};
use crate::operators::resample::{
    bicubic_taps, keys_cubic, spectral_downsample, SpectralWindow,
};
use crate::operators::{conv_apply, downsample_apply, ConvKernel, ResampleMode};
use crate::tensor::Tensor;

/// Anti-aliasing filter of a [`SubsampleOp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleKind {
    /// Ideal low-pass (spectral truncation).
    Shannon,
    /// Raised-cosine spectral window vanishing at the band edge.
    SmoothSpectral,
    /// Keys bicubic taps, an approximation of the ideal low-pass.
    Bicubic,
    /// Block averaging. Not band-limited, but it composes exactly across
    /// factors.
    Avgpool,
}

impl SubsampleKind {
    pub const ALL: [SubsampleKind; 4] = [
        SubsampleKind::Shannon,
        SubsampleKind::SmoothSpectral,
        SubsampleKind::Bicubic,
        SubsampleKind::Avgpool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SubsampleKind::Shannon => "shannon",
            SubsampleKind::SmoothSpectral => "smooth_spectral",
            SubsampleKind::Bicubic => "bicubic",
            SubsampleKind::Avgpool => "avgpool",
        }
    }

    /// Bound on the filter's response outside the band, for band-limited kinds.
    pub fn band_tolerance(self) -> Option<f64> {
        match self {
            SubsampleKind::Shannon => Some(1e-10),
            SubsampleKind::SmoothSpectral => Some(1e-3),
            SubsampleKind::Bicubic | SubsampleKind::Avgpool => None,
        }
    }
}

impl FromStr for SubsampleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SubsampleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "subsampling filter",
                name: s.to_string(),
            })
    }
}

impl fmt::Display for SubsampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsampleOp {
    factor: usize,
    kind: SubsampleKind,
}

impl SubsampleOp {
    pub fn new(factor: usize, kind: SubsampleKind) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("subsampling factor must be >= 1"));
        }
        Ok(Self { factor, kind })
    }

    pub fn shannon(factor: usize) -> Result<Self> {
        Self::new(factor, SubsampleKind::Shannon)
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn kind(&self) -> SubsampleKind {
        self.kind
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        alias_free_downsample(x, self)
    }

    /// Magnitude of the per-axis filter response at every bin of an
    /// `n`-point grid.
    pub fn axis_response(&self, n: usize) -> Result<Vec<f64>> {
        let s = self.factor;
        if n % s != 0 {
            return Err(Error::invalid(format!("grid {n} not divisible by factor {s}")));
        }
        let window = match self.kind {
            SubsampleKind::Shannon => Some(SpectralWindow::Shannon),
            SubsampleKind::SmoothSpectral => Some(SpectralWindow::RaisedCosine),
            _ => None,
        };
        if let Some(win) = window {
            return Ok((0..n).map(|k| win.weight(signed_freq(k, n), n, s)).collect());
        }
        let (first, taps): (i64, Vec<f64>) = match self.kind {
            SubsampleKind::Bicubic => bicubic_taps(s),
            _ => (0, vec![1.0 / s as f64; s]),
        };
        Ok((0..n)
            .map(|k| {
                let omega = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                taps.iter()
                    .enumerate()
                    .map(|(j, &v)| Complex64::from_polar(v, -omega * (first + j as i64) as f64))
                    .sum::<Complex64>()
                    .norm()
            })
            .collect())
    }

    /// Largest per-axis response strictly outside `[-π/s, π/s]` on an
    /// `n`-point grid.
    pub fn out_of_band_peak(&self, n: usize) -> Result<f64> {
        let resp = self.axis_response(n)?;
        let m = n / self.factor;
        Ok(resp
            .iter()
            .enumerate()
            .filter(|&(k, _)| 2 * signed_freq(k, n).unsigned_abs() as usize > m)
            .map(|(_, &v)| v)
            .fold(0.0, f64::max))
    }

    /// Check the spectral-support invariant of band-limited kinds on an
    /// `n`-point grid. Other kinds always pass.
    pub fn check_support(&self, n: usize) -> Result<()> {
        let Some(tol) = self.kind.band_tolerance() else {
            return Ok(());
        };
        let peak = self.out_of_band_peak(n)?;
        if peak > tol {
            return Err(Error::invalid(format!(
                "{} filter leaks {peak:e} outside the band (limit {tol:e})",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Filter with the operator's anti-aliasing filter, then keep every `s`-th
/// sample starting at index 0.
pub fn alias_free_downsample(x: &Tensor, op: &SubsampleOp) -> Result<Tensor> {
    let s = op.factor;
    match op.kind {
        SubsampleKind::Shannon => spectral_downsample(x, s, SpectralWindow::Shannon),
        SubsampleKind::SmoothSpectral => spectral_downsample(x, s, SpectralWindow::RaisedCosine),
        SubsampleKind::Bicubic => downsample_apply(x, s, ResampleMode::Bicubic),
        SubsampleKind::Avgpool => avgpool_factored(x, s),
    }
}

/// Block mean over `s x s` blocks, computed as successive poolings by the
/// prime factors of `s` in ascending order.
///
/// Pooling by 16 and pooling by 2 then by 8 perform the same floating-point
/// operations, so composed factors agree bit for bit whenever the factors of
/// the inner pooling are no larger than those of the outer one.
pub fn avgpool_factored(x: &Tensor, s: usize) -> Result<Tensor> {
    let (_, h, w) = x.image_dims()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!("image {h}x{w} not divisible by factor {s}")));
    }
    let mut out = x.clone();
    for p in prime_factors(s) {
        out = downsample_apply(&out, p, ResampleMode::Avgpool)?;
    }
    Ok(out)
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

/// How to build the high-resolution kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum LiftMethod {
    /// Spectral zero-padding: `Ĥ` equals `ĥ` on the band and vanishes
    /// outside. `grid` is the low-resolution image size; the lifted kernel
    /// covers the full `s·grid` periodic plane with its origin at `(0, 0)`.
    ShannonZeroPad { grid: (usize, usize) },
    /// Keys bicubic interpolation of `h` onto the fine grid, taps scaled by
    /// `1/s²` so the lifted kernel keeps the sum of `h`.
    BicubicUpsample,
}

pub fn lift_kernel(h: &ConvKernel, s: usize, method: LiftMethod) -> Result<ConvKernel> {
    if s == 0 {
        return Err(Error::invalid("lifting factor must be >= 1"));
    }
    if s == 1 {
        return Ok(h.clone());
    }
    match method {
        LiftMethod::ShannonZeroPad { grid } => lift_shannon(h, s, grid),
        LiftMethod::BicubicUpsample => Ok(lift_bicubic(h, s)),
    }
}

fn lift_shannon(h: &ConvKernel, s: usize, (mh, mw): (usize, usize)) -> Result<ConvKernel> {
    let lr = h.transfer(mh, mw)?;
    let (nh, nw) = (mh * s, mw * s);
    let mut spec = vec![Complex64::default(); nh * nw];
    let band_bin = |k: usize, n: usize, m: usize| -> Option<usize> {
        let f = signed_freq(k, n);
        (2 * f.unsigned_abs() as usize <= m).then(|| f.rem_euclid(m as i64) as usize)
    };
    for ky in 0..nh {
        let Some(ly) = band_bin(ky, nh, mh) else { continue };
        for kx in 0..nw {
            let Some(lx) = band_bin(kx, nw, mw) else { continue };
            spec[ky * nw + kx] = lr[ly * mw + lx];
        }
    }
    let taps = Fft2::new(nh, nw).inverse_real(spec);
    ConvKernel::with_origin(Tensor::new(vec![nh, nw], taps)?, (0, 0))
}

fn lift_bicubic(h: &ConvKernel, s: usize) -> ConvKernel {
    let (kh, kw) = h.extents();
    let (oi, oj) = h.origin();
    let sf = s as f64;
    // fine offsets n with |n/s - k| < 2 for some coarse tap k
    let lo_i = -((oi as i64 + 2) * s as i64 - 1);
    let hi_i = (kh as i64 - 1 - oi as i64 + 2) * s as i64 - 1;
    let lo_j = -((oj as i64 + 2) * s as i64 - 1);
    let hi_j = (kw as i64 - 1 - oj as i64 + 2) * s as i64 - 1;
    let weights = |lo: i64, hi: i64, origin: usize, len: usize| -> Vec<Vec<f64>> {
        (lo..=hi)
            .map(|n| {
                (0..len)
                    .map(|k| keys_cubic(n as f64 / sf - (k as f64 - origin as f64)))
                    .collect()
            })
            .collect()
    };
    let wi = weights(lo_i, hi_i, oi, kh);
    let wj = weights(lo_j, hi_j, oj, kw);
    let taps = h.taps().data();
    let (fh, fw) = (wi.len(), wj.len());
    let scale = 1.0 / (sf * sf);
    let fine = Tensor::from_fn(&[fh, fw], |idx| {
        let (a, b) = (&wi[idx / fw], &wj[idx % fw]);
        let mut acc = 0.0;
        for (ki, &wa) in a.iter().enumerate() {
            if wa == 0.0 {
                continue;
            }
            for (kj, &wb) in b.iter().enumerate() {
                acc += wa * wb * taps[ki * kw + kj];
            }
        }
        acc * scale
    });
    ConvKernel::with_origin(fine, ((-lo_i) as usize, (-lo_j) as usize))
        .expect("origin inside the lifted support")
}

/// Relative discrepancy `max|L − R| / max|L|` between `L = S_s(X) ∗ h` and
/// `R = S_s(X ∗ H)`.
pub fn verify_equivalence(x: &Tensor, h: &ConvKernel, big_h: &ConvKernel, sub: &SubsampleOp) -> Result<f64> {
    let left = conv_apply(&sub.apply(x)?, h)?;
    let right = sub.apply(&conv_apply(x, big_h)?)?;
    left.same_shape(&right)?;
    let scale = left.max_abs();
    if scale == 0.0 {
        return Ok(right.max_abs());
    }
    Ok(left.sub(&right).max_abs() / scale)
}

/// `max|S_{ab}(X) − S_a(S_b(X))|`.
pub fn compose_check(x: &Tensor, a: usize, b: usize, kind: SubsampleKind) -> Result<f64> {
    let (_, h, w) = x.image_dims()?;
    let ab = a
        .checked_mul(b)
        .filter(|&ab| ab > 0)
        .ok_or_else(|| Error::invalid("factors must be >= 1"))?;
    if h % ab != 0 || w % ab != 0 {
        return Err(Error::invalid(format!("image {h}x{w} not divisible by {ab}")));
    }
    let direct = SubsampleOp::new(ab, kind)?.apply(x)?;
    let inner = SubsampleOp::new(b, kind)?.apply(x)?;
    let nested = SubsampleOp::new(a, kind)?.apply(&inner)?;
    Ok(direct.sub(&nested).max_abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::make_gaussian_kernel;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_unit(&[1, n, n], &mut rng)
    }

    #[test]
    fn factor_one_is_identity() {
        let x = random_image(1, 12);
        for kind in SubsampleKind::ALL {
            let y = SubsampleOp::new(1, kind).unwrap().apply(&x).unwrap();
            assert!(y.sub(&x).max_abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn constant_image_keeps_value() {
        let x = Tensor::full(&[1, 16, 16], 0.7);
        for kind in SubsampleKind::ALL {
            let y = SubsampleOp::new(4, kind).unwrap().apply(&x).unwrap();
            assert_eq!(y.shape(), &[1, 4, 4]);
            assert!(y.map(|v| v - 0.7).max_abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn in_band_sinusoid_decimates_exactly() {
        let (n, s) = (32usize, 4usize);
        let (fy, fx) = (1.0, 3.0);
        let phase = 0.3;
        let wave = |i: f64, j: f64, len: f64| {
            (2.0 * std::f64::consts::PI * (fy * i + fx * j) / len + phase).cos()
        };
        let x = Tensor::from_fn(&[1, n, n], |idx| wave((idx / n) as f64, (idx % n) as f64, n as f64));
        let y = SubsampleOp::shannon(s).unwrap().apply(&x).unwrap();
        let m = n / s;
        let expect = Tensor::from_fn(&[1, m, m], |idx| {
            wave((idx / m) as f64, (idx % m) as f64, m as f64)
        });
        assert!(y.sub(&expect).max_abs() < 1e-6);
    }

    #[test]
    fn spectral_support() {
        for s in [2usize, 3, 4, 8] {
            let n = 24 * s;
            for kind in [SubsampleKind::Shannon, SubsampleKind::SmoothSpectral] {
                let op = SubsampleOp::new(s, kind).unwrap();
                op.check_support(n).unwrap();
                assert!(op.out_of_band_peak(n).unwrap() <= kind.band_tolerance().unwrap());
            }
        }
        // bicubic leaks outside the band, so it carries no support claim
        let bic = SubsampleOp::new(2, SubsampleKind::Bicubic).unwrap();
        assert!(bic.out_of_band_peak(64).unwrap() > 1e-3);
        bic.check_support(64).unwrap();
    }

    #[test]
    fn lift_at_unit_factor_is_identity() {
        let h = make_gaussian_kernel(5, 1.2).unwrap();
        for m in [LiftMethod::ShannonZeroPad { grid: (8, 8) }, LiftMethod::BicubicUpsample] {
            assert_eq!(lift_kernel(&h, 1, m).unwrap(), h);
        }
    }

    #[test]
    fn dirac_lifts_to_band_identity() {
        let x = random_image(2, 32);
        let sub = SubsampleOp::shannon(2).unwrap();
        let big = lift_kernel(&ConvKernel::identity(), 2, LiftMethod::ShannonZeroPad { grid: (16, 16) })
            .unwrap();
        let lhs = sub.apply(&conv_apply(&x, &big).unwrap()).unwrap();
        let rhs = sub.apply(&x).unwrap();
        assert!(lhs.sub(&rhs).max_abs() < 1e-6);
        let same = verify_equivalence(&x, &ConvKernel::identity(), &ConvKernel::identity(), &SubsampleOp::shannon(1).unwrap())
            .unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn shannon_lift_restricts_to_low_band() {
        let h = make_gaussian_kernel(7, 1.5).unwrap();
        let (m, s) = (12usize, 3usize);
        let big = lift_kernel(&h, s, LiftMethod::ShannonZeroPad { grid: (m, m) }).unwrap();
        let hr = big.transfer(m * s, m * s).unwrap();
        let lr = h.transfer(m, m).unwrap();
        let n = m * s;
        for ky in 0..n {
            for kx in 0..n {
                let (fy, fx) = (signed_freq(ky, n), signed_freq(kx, n));
                let v = hr[ky * n + kx];
                if 2 * fy.unsigned_abs() as usize <= m && 2 * fx.unsigned_abs() as usize <= m {
                    let l = lr[fy.rem_euclid(m as i64) as usize * m + fx.rem_euclid(m as i64) as usize];
                    assert!((v - l).norm() < 1e-12);
                } else {
                    assert!(v.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bicubic_lift_preserves_sum_and_symmetry() {
        let h = make_gaussian_kernel(5, 1.0).unwrap();
        let big = lift_kernel(&h, 2, LiftMethod::BicubicUpsample).unwrap();
        assert!((big.sum() - 1.0).abs() < 1e-12);
        for (di, dj, v) in big.offsets() {
            assert!((big.tap(-di, -dj) - v).abs() < 1e-15);
        }
        // taps on the coarse lattice are the coarse taps scaled by 1/s²
        assert!((big.tap(2, 4) - h.tap(1, 2) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_shannon_equivalence() {
        let x = random_image(3, 64);
        let h = make_gaussian_kernel(9, 1.5).unwrap();
        let big = lift_kernel(&h, 2, LiftMethod::ShannonZeroPad { grid: (32, 32) }).unwrap();
        let err = verify_equivalence(&x, &h, &big, &SubsampleOp::shannon(2).unwrap()).unwrap();
        assert!(err <= 1e-5, "{err}");
        let smooth = SubsampleOp::new(2, SubsampleKind::SmoothSpectral).unwrap();
        assert!(verify_equivalence(&x, &h, &big, &smooth).unwrap() <= 1e-5);
    }

    #[test]
    fn avgpool_composes_exactly() {
        let x = random_image(4, 32);
        assert_eq!(compose_check(&x, 8, 2, SubsampleKind::Avgpool).unwrap(), 0.0);
        assert_eq!(compose_check(&x, 4, 4, SubsampleKind::Avgpool).unwrap(), 0.0);
        assert_eq!(compose_check(&x, 1, 16, SubsampleKind::Bicubic).unwrap(), 0.0);
        assert_eq!(compose_check(&x, 16, 1, SubsampleKind::Shannon).unwrap(), 0.0);
        let x = random_image(5, 24);
        assert!(compose_check(&x, 2, 3, SubsampleKind::Avgpool).unwrap() < 1e-15);
        assert!(compose_check(&x, 5, 3, SubsampleKind::Avgpool).is_err());
    }

    #[test]
    fn prime_factorization() {
        assert_eq!(prime_factors(1), Vec::<usize>::new());
        assert_eq!(prime_factors(16), vec![2, 2, 2, 2]);
        assert_eq!(prime_factors(12), vec![2, 2, 3]);
        assert_eq!(prime_factors(7), vec![7]);
    }

    #[test]
    fn parse_kind() {
        for k in SubsampleKind::ALL {
            assert_eq!(k.name().parse::<SubsampleKind>().unwrap(), k);
        }
        assert!("lanczos".parse::<SubsampleKind>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn shannon_equivalence_holds(
            seed in any::<u64>(),
            s in 2usize..4,
            m in 6usize..14,
            size in prop::sample::select(vec![1usize, 3, 5]),
            sigma in 0.3f64..2.0,
        ) {
            let x = random_image(seed, m * s);
            let h = make_gaussian_kernel(size, sigma).unwrap();
            let big = lift_kernel(&h, s, LiftMethod::ShannonZeroPad { grid: (m, m) }).unwrap();
            let err = verify_equivalence(&x, &h, &big, &SubsampleOp::shannon(s).unwrap()).unwrap();
            prop_assert!(err <= 1e-5, "{}", err);
        }

        #[test]
        fn band_limited_filters_respect_support(s in 1usize..9, m in 1usize..12) {
            for kind in [SubsampleKind::Shannon, SubsampleKind::SmoothSpectral] {
                prop_assert!(SubsampleOp::new(s, kind).unwrap().check_support(m * s).is_ok());
            }
        }
    }
}
