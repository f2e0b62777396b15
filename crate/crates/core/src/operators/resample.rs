//! Integer-factor downsampling: block averaging, Keys bicubic filtering and
//! spectral-window (alias-free) resampling.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{ForwardOperator, OpKind, SolverHint};
use crate::error::{Error, Result};
use crate::fft::{signed_freq, Fft2};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    Avgpool,
    Bicubic,
    Shannon,
}

/// Frequency response of a spectral low-pass filter, separable over axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralWindow {
    /// Ideal low-pass on the band `[-pi/s, pi/s]`; bins exactly on the band
    /// edge get weight 1/2 so the decimated signal stays real.
    Shannon,
    /// Flat up to half the band, raised-cosine roll-off reaching zero at the
    /// band edge.
    RaisedCosine,
}

impl SpectralWindow {
    /// Weight of HR bin with signed frequency `f` on an `n`-point grid, for
    /// decimation by `s`.
    pub fn weight(self, f: i64, n: usize, s: usize) -> f64 {
        if s == 1 {
            return 1.0;
        }
        let m = (n / s) as f64;
        let nu = 2.0 * (f.abs() as f64) / m;
        match self {
            SpectralWindow::Shannon => {
                if nu < 1.0 {
                    1.0
                } else if nu == 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            SpectralWindow::RaisedCosine => {
                if nu <= 0.5 {
                    1.0
                } else if nu < 1.0 {
                    0.5 * (1.0 + (2.0 * std::f64::consts::PI * (nu - 0.5)).cos())
                } else {
                    0.0
                }
            }
        }
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn keys_cubic(u: f64) -> f64 {
    const A: f64 = -0.5;
    let x = u.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Anti-aliasing taps for bicubic decimation by `s`: output sample `m`
/// reads `x[s*m + j]` with weight `taps[j - first]`. Taps are centered on
/// `(s-1)/2` (the middle of the block) and normalized to sum 1.
pub fn bicubic_taps(s: usize) -> (i64, Vec<f64>) {
    let c = (s as f64 - 1.0) / 2.0;
    let lo = (c - 2.0 * s as f64).floor() as i64;
    let hi = (c + 2.0 * s as f64).ceil() as i64;
    let mut first = None;
    let mut taps = Vec::new();
    for j in lo..=hi {
        let v = keys_cubic((j as f64 - c) / s as f64);
        if v != 0.0 || first.is_some() {
            first.get_or_insert(j);
            taps.push(v);
        }
    }
    while taps.last() == Some(&0.0) {
        taps.pop();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|v| *v /= total);
    (first.unwrap_or(0), taps)
}

/// A sparse linear map along one axis: `out[i] = sum_k w * in[idx]` for
/// `(idx, w)` in `rows[i]`.
struct AxisMap {
    in_len: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    fn transpose(&self) -> AxisMap {
        let mut rows = vec![Vec::new(); self.in_len];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                rows[j].push((i, w));
            }
        }
        AxisMap {
            in_len: self.rows.len(),
            rows,
        }
    }

    /// Apply along `axis` (1 = rows of the image, 2 = columns).
    fn apply(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (c, h, w) = x.image_dims()?;
        let len = if axis == 1 { h } else { w };
        if len != self.in_len {
            return Err(Error::shape(format!(
                "axis {axis} has length {len}, map expects {}",
                self.in_len
            )));
        }
        let out_len = self.rows.len();
        let (oh, ow) = if axis == 1 { (out_len, w) } else { (h, out_len) };
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let src = x.channel(ch);
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            if axis == 1 {
                for (i, row) in self.rows.iter().enumerate() {
                    for &(k, wt) in row {
                        for j in 0..w {
                            dst[i * ow + j] += wt * src[k * w + j];
                        }
                    }
                }
            } else {
                for i in 0..h {
                    for (j, row) in self.rows.iter().enumerate() {
                        let mut acc = 0.0;
                        for &(k, wt) in row {
                            acc += wt * src[i * w + k];
                        }
                        dst[i * ow + j] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![c, oh, ow], out)
    }

    fn apply_2d(&self, cols: &AxisMap, x: &Tensor) -> Result<Tensor> {
        cols.apply(&self.apply(x, 1)?, 2)
    }
}

fn avgpool_map(n: usize, s: usize) -> AxisMap {
    let inv = 1.0 / s as f64;
    AxisMap {
        in_len: n,
        rows: (0..n / s)
            .map(|m| (0..s).map(|j| (s * m + j, inv)).collect())
            .collect(),
    }
}

fn bicubic_map(n: usize, s: usize) -> AxisMap {
    let (first, taps) = bicubic_taps(s);
    AxisMap {
        in_len: n,
        rows: (0..n / s)
            .map(|m| {
                taps.iter()
                    .enumerate()
                    .map(|(t, &w)| {
                        let idx = (s as i64 * m as i64 + first + t as i64).rem_euclid(n as i64);
                        (idx as usize, w)
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Periodic Keys interpolation from `m` samples onto `m*s` samples, with HR
/// sample `n` located at LR coordinate `(n - (s-1)/2) / s`.
fn bicubic_upsample_map(m: usize, s: usize) -> AxisMap {
    let c = (s as f64 - 1.0) / 2.0;
    AxisMap {
        in_len: m,
        rows: (0..m * s)
            .map(|n| {
                let p = (n as f64 - c) / s as f64;
                let base = p.floor() as i64;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for k in base - 1..=base + 2 {
                    let w = keys_cubic(p - k as f64);
                    if w != 0.0 {
                        let idx = k.rem_euclid(m as i64) as usize;
                        match row.iter_mut().find(|e| e.0 == idx) {
                            Some(e) => e.1 += w,
                            None => row.push((idx, w)),
                        }
                    }
                }
                row
            })
            .collect(),
    }
}

fn check_divisible(h: usize, w: usize, s: usize) -> Result<()> {
    if s == 0 {
        return Err(Error::invalid("downsampling factor must be >= 1"));
    }
    if h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} not divisible by factor {s}"
        )));
    }
    Ok(())
}

/// For each LR bin `k` on an `m = n/s` grid, the HR bins `k + a*m` with
/// their window weights (zero weights dropped).
fn alias_lists(n: usize, s: usize, window: SpectralWindow) -> Vec<Vec<(usize, f64)>> {
    let m = n / s;
    (0..m)
        .map(|k| {
            (0..s)
                .map(|a| k + a * m)
                .map(|hr| (hr, window.weight(signed_freq(hr, n), n, s)))
                .filter(|&(_, w)| w != 0.0)
                .collect()
        })
        .collect()
}

/// Spectral-window filtering followed by decimation, computed exactly on
/// the periodic grid through the aliasing sum.
pub fn spectral_downsample(x: &Tensor, s: usize, window: SpectralWindow) -> Result<Tensor> {
    let (c, h, w) = x.image_dims()?;
    check_divisible(h, w, s)?;
    let (mh, mw) = (h / s, w / s);
    let rows = alias_lists(h, s, window);
    let cols = alias_lists(w, s, window);
    let hr = Fft2::new(h, w);
    let lr = Fft2::new(mh, mw);
    let scale = 1.0 / (s * s) as f64;
    let mut out = Vec::with_capacity(c * mh * mw);
    for ch in 0..c {
        let spec = hr.forward_real(x.channel(ch));
        let mut low = vec![Complex64::default(); mh * mw];
        for (ky, ry) in rows.iter().enumerate() {
            for (kx, rx) in cols.iter().enumerate() {
                let mut acc = Complex64::default();
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        acc += spec[iy * w + ix] * (wy * wx);
                    }
                }
                low[ky * mw + kx] = acc * scale;
            }
        }
        out.extend(lr.inverse_real(low));
    }
    Tensor::new(vec![c, mh, mw], out)
}

/// Adjoint (`adjoint == true`) or Moore-Penrose pseudoinverse of
/// [`spectral_downsample`].
fn spectral_upsample(y: &Tensor, s: usize, window: SpectralWindow, adjoint: bool) -> Result<Tensor> {
    let (c, mh, mw) = y.image_dims()?;
    if s == 0 {
        return Err(Error::invalid("downsampling factor must be >= 1"));
    }
    let (h, w) = (mh * s, mw * s);
    let rows = alias_lists(h, s, window);
    let cols = alias_lists(w, s, window);
    let energy = |lists: &Vec<Vec<(usize, f64)>>| -> Vec<f64> {
        lists
            .iter()
            .map(|l| l.iter().map(|&(_, w)| w * w).sum::<f64>() / s as f64)
            .collect()
    };
    let (ey, ex) = (energy(&rows), energy(&cols));
    let hr = Fft2::new(h, w);
    let lr = Fft2::new(mh, mw);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let low = lr.forward_real(y.channel(ch));
        let mut spec = vec![Complex64::default(); h * w];
        for (ky, ry) in rows.iter().enumerate() {
            for (kx, rx) in cols.iter().enumerate() {
                let gain = if adjoint {
                    1.0
                } else {
                    let d = ey[ky] * ex[kx];
                    if d == 0.0 {
                        continue;
                    }
                    1.0 / d
                };
                let v = low[ky * mw + kx] * gain;
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        spec[iy * w + ix] = v * (wy * wx);
                    }
                }
            }
        }
        out.extend(hr.inverse_real(spec));
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn spectral_upsample_adjoint(y: &Tensor, s: usize, window: SpectralWindow) -> Result<Tensor> {
    spectral_upsample(y, s, window, true)
}

pub fn spectral_pseudoinverse(y: &Tensor, s: usize, window: SpectralWindow) -> Result<Tensor> {
    spectral_upsample(y, s, window, false)
}

pub fn downsample_apply(x: &Tensor, s: usize, mode: ResampleMode) -> Result<Tensor> {
    let (_, h, w) = x.image_dims()?;
    check_divisible(h, w, s)?;
    match mode {
        ResampleMode::Avgpool => avgpool_map(h, s).apply_2d(&avgpool_map(w, s), x),
        ResampleMode::Bicubic => bicubic_map(h, s).apply_2d(&bicubic_map(w, s), x),
        ResampleMode::Shannon => spectral_downsample(x, s, SpectralWindow::Shannon),
    }
}

pub fn downsample_adjoint(y: &Tensor, s: usize, mode: ResampleMode) -> Result<Tensor> {
    let (_, mh, mw) = y.image_dims()?;
    let (h, w) = (mh * s, mw * s);
    match mode {
        ResampleMode::Avgpool => avgpool_map(h, s)
            .transpose()
            .apply_2d(&avgpool_map(w, s).transpose(), y),
        ResampleMode::Bicubic => bicubic_map(h, s)
            .transpose()
            .apply_2d(&bicubic_map(w, s).transpose(), y),
        ResampleMode::Shannon => spectral_upsample_adjoint(y, s, SpectralWindow::Shannon),
    }
}

/// avgpool: block replication (so `A A^+ = Id`); bicubic: Keys interpolation;
/// shannon: spectral zero-padding.
pub fn downsample_pseudoinverse(y: &Tensor, s: usize, mode: ResampleMode) -> Result<Tensor> {
    let (_, mh, mw) = y.image_dims()?;
    match mode {
        ResampleMode::Avgpool => Ok(downsample_adjoint(y, s, mode)?.scale((s * s) as f64)),
        ResampleMode::Bicubic => {
            bicubic_upsample_map(mh, s).apply_2d(&bicubic_upsample_map(mw, s), y)
        }
        ResampleMode::Shannon => spectral_pseudoinverse(y, s, SpectralWindow::Shannon),
    }
}

#[derive(Clone, Debug)]
pub struct Downsample {
    factor: usize,
    mode: ResampleMode,
}

impl Downsample {
    pub fn new(factor: usize, mode: ResampleMode) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("downsampling factor must be >= 1"));
        }
        Ok(Self { factor, mode })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn mode(&self) -> ResampleMode {
        self.mode
    }
}

impl ForwardOperator for Downsample {
    fn kind(&self) -> OpKind {
        OpKind::Downsample
    }

    fn hint(&self) -> SolverHint {
        SolverHint::GeneralLinear
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            &[c, h, w] => {
                check_divisible(h, w, self.factor)?;
                Ok(vec![c, h / self.factor, w / self.factor])
            }
            s => Err(Error::shape(format!("expected (C,H,W), got {s:?}"))),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        downsample_apply(x, self.factor, self.mode)
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        downsample_adjoint(y, self.factor, self.mode)
    }

    fn pseudoinverse(&self, y: &Tensor) -> Result<Tensor> {
        downsample_pseudoinverse(y, self.factor, self.mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const MODES: [ResampleMode; 3] = [
        ResampleMode::Avgpool,
        ResampleMode::Bicubic,
        ResampleMode::Shannon,
    ];

    #[test]
    fn factor_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_unit(&[2, 6, 10], &mut rng);
        for mode in MODES {
            let y = downsample_apply(&x, 1, mode).unwrap();
            assert!(y.sub(&x).max_abs() < 1e-12, "{mode:?}");
            let p = downsample_pseudoinverse(&x, 1, mode).unwrap();
            assert!(p.sub(&x).max_abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn constants_survive_every_mode() {
        let x = Tensor::full(&[1, 16, 16], 0.3);
        for mode in MODES {
            let y = downsample_apply(&x, 4, mode).unwrap();
            assert!(y.map(|v| v - 0.3).max_abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn avgpool_block_mean() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = downsample_apply(&x, 2, ResampleMode::Avgpool).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn non_divisible_rejected() {
        let x = Tensor::zeros(&[1, 6, 8]);
        for mode in MODES {
            assert!(downsample_apply(&x, 4, mode).is_err());
        }
    }

    #[test]
    fn bicubic_taps_normalized_and_symmetric() {
        for s in 1..6 {
            let (first, taps) = bicubic_taps(s);
            assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let c = (s as f64 - 1.0) / 2.0;
            let last = first + taps.len() as i64 - 1;
            assert!(((first as f64 + last as f64) / 2.0 - c).abs() < 1e-12);
        }
        assert_eq!(bicubic_taps(1), (0, vec![1.0]));
    }

    #[test]
    fn range_identity_for_avgpool_and_shannon() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = Tensor::rand_unit(&[1, 4, 4], &mut rng);
        for mode in [ResampleMode::Avgpool, ResampleMode::Shannon] {
            let back = downsample_apply(&downsample_pseudoinverse(&y, 4, mode).unwrap(), 4, mode)
                .unwrap();
            assert!(back.sub(&y).max_abs() < 1e-10, "{mode:?}");
        }
    }

    #[test]
    fn shannon_window_support() {
        for n in [16usize, 18, 32] {
            for s in [2usize, 3, 4] {
                if n % s != 0 {
                    continue;
                }
                let m = n / s;
                for k in 0..n {
                    let f = signed_freq(k, n);
                    for win in [SpectralWindow::Shannon, SpectralWindow::RaisedCosine] {
                        if 2 * f.unsigned_abs() as usize > m {
                            assert_eq!(win.weight(f, n, s), 0.0);
                        }
                    }
                }
            }
        }
    }
}
