//! Conditional Gaussian prior on a discrete-cosine latent space.
//!
//! `x = b + Qᵀ z` with `z | c ~ N(W c, diag(s))` and `Q` the orthonormal
//! 2-D DCT-II basis restricted to the `d` lowest frequencies. Every map of
//! the stochastic auto-encoder is available in closed form, which makes the
//! prior a ground truth for the sampler and the prompt optimizer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::{Prior, PriorKind};
use crate::error::{Error, Result};
use crate::operators::DegradationOp;
use crate::tensor::Tensor;

/// Orthonormal DCT-II matrix of size `n x n`, row `k` is the `k`-th basis vector.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for j in 0..n {
            m[k * n + j] =
                a * (std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2.0 * nf)).cos();
        }
    }
    m
}

/// Separable orthonormal 2-D DCT on one `h x w` plane.
#[derive(Clone, Debug)]
struct Dct2 {
    h: usize,
    w: usize,
    ch: Vec<f64>,
    cw: Vec<f64>,
}

impl Dct2 {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            ch: dct_matrix(h),
            cw: dct_matrix(w),
        }
    }

    /// `Y = C_h X C_wᵀ`
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0.0; h * w];
        for i in 0..h {
            let row = &x[i * w..(i + 1) * w];
            for v in 0..w {
                let basis = &self.cw[v * w..(v + 1) * w];
                tmp[i * w + v] = row.iter().zip(basis).map(|(a, b)| a * b).sum();
            }
        }
        for u in 0..h {
            let basis = &self.ch[u * h..(u + 1) * h];
            for v in 0..w {
                let mut acc = 0.0;
                for i in 0..h {
                    acc += basis[i] * tmp[i * w + v];
                }
                out[u * w + v] = acc;
            }
        }
    }

    /// `X = C_hᵀ Y C_w`
    fn inverse(&self, y: &[f64], out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0.0; h * w];
        for u in 0..h {
            let row = &y[u * w..(u + 1) * w];
            for j in 0..w {
                let mut acc = 0.0;
                for v in 0..w {
                    acc += row[v] * self.cw[v * w + j];
                }
                tmp[u * w + j] = acc;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for u in 0..h {
                    acc += self.ch[u * h + i] * tmp[u * w + j];
                }
                out[i * w + j] = acc;
            }
        }
    }
}

/// Configuration-file description of an [`AnalyticGaussianPrior`].
///
/// Latent variances follow `amplitude / (1 + (u² + v²) / corner²)^exponent`
/// where `(u, v)` is the DCT frequency index of the coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticPriorSpec {
    /// Number of retained DCT coefficients; `None` keeps all of them.
    pub latent_dim: Option<usize>,
    pub cond_dim: usize,
    pub amplitude: f64,
    pub corner: f64,
    pub exponent: f64,
    pub offset: f64,
    /// Standard deviation of the entries of the conditioning map `W`.
    pub cond_scale: f64,
    pub cond_seed: u64,
}

impl Default for AnalyticPriorSpec {
    fn default() -> Self {
        Self {
            latent_dim: None,
            cond_dim: 4,
            amplitude: 0.2,
            corner: 4.0,
            exponent: 1.0,
            offset: 0.5,
            cond_scale: 1.0,
            cond_seed: 1000,
        }
    }
}

impl AnalyticPriorSpec {
    pub fn build(&self, image_shape: &[usize]) -> Result<AnalyticGaussianPrior> {
        let (c, h, w) = image_dims(image_shape)?;
        let n = c * h * w;
        let d = self.latent_dim.unwrap_or(n);
        if !(self.amplitude > 0.0 && self.corner > 0.0 && self.exponent >= 0.0) {
            return Err(Error::Config(
                "analytic prior needs amplitude > 0, corner > 0, exponent >= 0".into(),
            ));
        }
        let order = frequency_order(c, h, w);
        if d == 0 || d > n {
            return Err(Error::Config(format!("latent_dim must lie in [1, {n}], got {d}")));
        }
        let variances = order[..d]
            .iter()
            .map(|&g| {
                let (_, u, v) = split_index(g, h, w);
                let f2 = (u * u + v * v) as f64;
                self.amplitude / (1.0 + f2 / (self.corner * self.corner)).powf(self.exponent)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cond_seed);
        let cond_map = DMatrix::from_fn(d, self.cond_dim, |_, _| {
            self.cond_scale * rng.sample::<f64, _>(StandardNormal)
        });
        AnalyticGaussianPrior::new(
            image_shape,
            d,
            variances,
            Tensor::full(image_shape, self.offset),
            cond_map,
            NoiseSchedule::default(),
        )
    }
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::shape(format!("expected a (C, H, W) image shape, got {shape:?}"))),
    }
}

fn split_index(g: usize, h: usize, w: usize) -> (usize, usize, usize) {
    (g / (h * w), (g / w) % h, g % w)
}

/// Coefficient-grid indices sorted by radial frequency, then channel, row, column.
fn frequency_order(c: usize, h: usize, w: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..c * h * w).collect();
    idx.sort_by_key(|&g| {
        let (ch, u, v) = split_index(g, h, w);
        (u * u + v * v, ch, u, v)
    });
    idx
}

/// Gaussian posterior of `x` under a linear observation model.
#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    pub mean: Tensor,
    pub covariance: DMatrix<f64>,
}

impl GaussianPosterior {
    pub fn marginal_variances(&self) -> Tensor {
        let shape = self.mean.shape().to_vec();
        Tensor::from_fn(&shape, |i| self.covariance[(i, i)])
    }
}

#[derive(Clone, Debug)]
pub struct AnalyticGaussianPrior {
    image_shape: Vec<usize>,
    dct: Dct2,
    /// Coefficient-grid index of each latent coordinate.
    kept: Vec<usize>,
    /// DCT frequency `(u, v)` of each latent coordinate.
    freqs: Vec<(usize, usize)>,
    variances: Vec<f64>,
    offset: Tensor,
    cond_map: DMatrix<f64>,
    schedule: NoiseSchedule,
}

impl AnalyticGaussianPrior {
    /// Keeps the `latent_dim` lowest DCT frequencies of an image of `image_shape`.
    pub fn new(
        image_shape: &[usize],
        latent_dim: usize,
        variances: Vec<f64>,
        offset: Tensor,
        cond_map: DMatrix<f64>,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        let (c, h, w) = image_dims(image_shape)?;
        let n = c * h * w;
        if latent_dim == 0 || latent_dim > n {
            return Err(Error::invalid(format!(
                "latent dimension must lie in [1, {n}], got {latent_dim}"
            )));
        }
        if variances.len() != latent_dim {
            return Err(Error::shape(format!(
                "{} latent variances for latent dimension {latent_dim}",
                variances.len()
            )));
        }
        if variances.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("latent variances must be positive and finite"));
        }
        if offset.shape() != image_shape {
            return Err(Error::shape(format!(
                "offset shape {:?} differs from image shape {image_shape:?}",
                offset.shape()
            )));
        }
        if cond_map.nrows() != latent_dim {
            return Err(Error::shape(format!(
                "conditioning map has {} rows, expected {latent_dim}",
                cond_map.nrows()
            )));
        }
        let mut kept = frequency_order(c, h, w);
        kept.truncate(latent_dim);
        let freqs = kept
            .iter()
            .map(|&g| {
                let (_, u, v) = split_index(g, h, w);
                (u, v)
            })
            .collect();
        Ok(Self {
            image_shape: image_shape.to_vec(),
            dct: Dct2::new(h, w),
            kept,
            freqs,
            variances,
            offset,
            cond_map,
            schedule,
        })
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn latent_dim(&self) -> usize {
        self.kept.len()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn is_full_basis(&self) -> bool {
        self.latent_dim() == self.image_len()
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn frequencies(&self) -> &[(usize, usize)] {
        &self.freqs
    }

    pub fn offset(&self) -> &Tensor {
        &self.offset
    }

    pub fn cond_map(&self) -> &DMatrix<f64> {
        &self.cond_map
    }

    /// Same prior with a different conditioning map.
    pub fn with_cond_map(&self, cond_map: DMatrix<f64>) -> Result<Self> {
        if cond_map.nrows() != self.latent_dim() {
            return Err(Error::shape("conditioning map row count"));
        }
        Ok(Self {
            cond_map,
            ..self.clone()
        })
    }

    fn check_cond(&self, c: &Tensor) -> Result<()> {
        if c.len() != self.cond_map.ncols() {
            return Err(Error::shape(format!(
                "conditioning vector has {} entries, prior expects {}",
                c.len(),
                self.cond_map.ncols()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        if z.shape() != [self.latent_dim()] {
            return Err(Error::shape(format!(
                "latent shape {:?}, expected [{}]",
                z.shape(),
                self.latent_dim()
            )));
        }
        Ok(())
    }

    /// Latent prior mean `w = W c`.
    pub fn latent_mean(&self, c: &Tensor) -> Result<Tensor> {
        self.check_cond(c)?;
        let cv = DVector::from_column_slice(c.data());
        let w = &self.cond_map * cv;
        Ok(Tensor::from_vec(w.as_slice().to_vec()))
    }

    /// Image-space prior mean `b + Qᵀ W c`.
    pub fn mean(&self, c: &Tensor) -> Result<Tensor> {
        self.decode_latent(&self.latent_mean(c)?)
    }

    /// Per-coordinate contraction `r_{t,i} = √s_i / √(ᾱ_t s_i + 1 − ᾱ_t)`.
    pub fn consistency_ratio(&self, t: u32) -> Result<Vec<f64>> {
        self.schedule.check(t)?;
        let ab = self.schedule.alpha_bar(t);
        Ok(self
            .variances
            .iter()
            .map(|&s| s.sqrt() / (ab * s + 1.0 - ab).sqrt())
            .collect())
    }

    pub fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.image_shape.as_slice() {
            return Err(Error::shape(format!(
                "image shape {:?}, prior expects {:?}",
                x.shape(),
                self.image_shape
            )));
        }
        let (c, h, w) = image_dims(&self.image_shape)?;
        let centred = x.sub(&self.offset);
        let mut coeffs = vec![0.0; c * h * w];
        for ch in 0..c {
            let plane = h * w;
            self.dct.forward(
                &centred.data()[ch * plane..(ch + 1) * plane],
                &mut coeffs[ch * plane..(ch + 1) * plane],
            );
        }
        Ok(Tensor::from_vec(self.kept.iter().map(|&g| coeffs[g]).collect()))
    }

    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        let (c, h, w) = image_dims(&self.image_shape)?;
        let plane = h * w;
        let mut coeffs = vec![0.0; c * plane];
        for (&g, &v) in self.kept.iter().zip(z.data()) {
            coeffs[g] = v;
        }
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            self.dct.inverse(
                &coeffs[ch * plane..(ch + 1) * plane],
                &mut out[ch * plane..(ch + 1) * plane],
            );
        }
        let mut x = Tensor::new(self.image_shape.clone(), out)?;
        x.axpy(1.0, &self.offset);
        Ok(x)
    }

    /// Exact probability-flow endpoint `w + r_t ⊙ (z_t − √ᾱ_t w)`.
    pub fn consistency_map(&self, z_t: &Tensor, t: u32, c: &Tensor) -> Result<Tensor> {
        self.check_latent(z_t)?;
        let r = self.consistency_ratio(t)?;
        let w = self.latent_mean(c)?;
        let sab = self.schedule.alpha_bar(t).sqrt();
        Ok(Tensor::from_fn(&[self.latent_dim()], |i| {
            let wi = w.data()[i];
            wi + r[i] * (z_t.data()[i] - sab * wi)
        }))
    }

    /// Closed-form `∇_c log p(z_next | z_prev, c)`.
    pub fn grad_logcond_closed(
        &self,
        z_next: &Tensor,
        z_prev: &Tensor,
        t_prev: u32,
        t_next: u32,
        c: &Tensor,
    ) -> Result<Tensor> {
        let var = transition_variance(&self.schedule, t_next)?;
        let g = self.consistency_map(z_prev, t_prev, c)?;
        self.check_latent(z_next)?;
        let san = self.schedule.alpha_bar(t_next).sqrt();
        let sap = self.schedule.alpha_bar(t_prev).sqrt();
        let r = self.consistency_ratio(t_prev)?;
        let weighted = DVector::from_fn(self.latent_dim(), |i, _| {
            let e = z_next.data()[i] - san * g.data()[i];
            (1.0 - r[i] * sap) * e
        });
        let grad = self.cond_map.transpose() * weighted * (san / var);
        Ok(Tensor::from_vec(grad.as_slice().to_vec()))
    }

    /// Draw `x ~ p(x | c)`.
    pub fn sample<R: Rng + ?Sized>(&self, c: &Tensor, rng: &mut R) -> Result<Tensor> {
        let w = self.latent_mean(c)?;
        let z = Tensor::from_fn(&[self.latent_dim()], |i| {
            w.data()[i] + self.variances[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        self.decode_latent(&z)
    }

    /// Image-space score `∇_x log p(x | c) = −Qᵀ S⁻¹ (Q(x − b) − W c)`,
    /// defined only when the basis is complete.
    pub fn score(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        if !self.is_full_basis() {
            return Err(Error::invalid(
                "the prior density on images needs a complete latent basis",
            ));
        }
        let z = self.encode_image(x)?;
        let w = self.latent_mean(c)?;
        let g = Tensor::from_fn(&[self.latent_dim()], |i| {
            -(z.data()[i] - w.data()[i]) / self.variances[i]
        });
        Ok(self.decode_latent(&g)?.sub(&self.offset))
    }

    /// Matrix `B = Qᵀ` whose columns are the decoded unit latents.
    pub fn synthesis_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.latent_dim();
        let n = self.image_len();
        let mut b = DMatrix::zeros(n, d);
        let mut e = Tensor::zeros(&[d]);
        for j in 0..d {
            e.data_mut()[j] = 1.0;
            let col = self.decode_latent(&e)?.sub(&self.offset);
            e.data_mut()[j] = 0.0;
            for (i, v) in col.data().iter().enumerate() {
                b[(i, j)] = *v;
            }
        }
        Ok(b)
    }

    /// Closed-form posterior of `x` given `y = A x + N(0, σ² I)`.
    pub fn posterior(&self, op: &DegradationOp, y: &Tensor, c: &Tensor) -> Result<GaussianPosterior> {
        let a = op.to_dense(&self.image_shape)?;
        let b = self.synthesis_matrix()?;
        let ab = &a * &b;
        let sigma2 = op.sigma_n().powi(2);
        let w = self.latent_mean(c)?;
        let ax0 = op.apply(&self.offset)?;
        if ax0.shape() != y.shape() {
            return Err(Error::shape("measurement shape"));
        }
        let resid = DVector::from_iterator(
            y.len(),
            y.data().iter().zip(ax0.data()).map(|(p, q)| p - q),
        );
        let d = self.latent_dim();
        let mut precision = ab.transpose() * &ab / sigma2;
        let mut rhs = ab.transpose() * resid / sigma2;
        for i in 0..d {
            precision[(i, i)] += 1.0 / self.variances[i];
            rhs[i] += w.data()[i] / self.variances[i];
        }
        let chol = precision
            .cholesky()
            .ok_or_else(|| Error::invalid("posterior precision is not positive definite"))?;
        let m = chol.solve(&rhs);
        let cov_z = chol.inverse();
        let mean = self.decode_latent(&Tensor::from_vec(m.as_slice().to_vec()))?;
        let covariance = &b * cov_z * b.transpose();
        Ok(GaussianPosterior { mean, covariance })
    }

    /// `log p(y | c)` with `x` integrated out.
    pub fn log_marginal_likelihood(&self, op: &DegradationOp, y: &Tensor, c: &Tensor) -> Result<f64> {
        let a = op.to_dense(&self.image_shape)?;
        let ab = &a * self.synthesis_matrix()?;
        let mean = op.apply(&self.mean(c)?)?;
        if mean.shape() != y.shape() {
            return Err(Error::shape("measurement shape"));
        }
        let m = y.len();
        let s = DVector::from_column_slice(&self.variances);
        let mut cov = &ab * DMatrix::from_diagonal(&s) * ab.transpose();
        for i in 0..m {
            cov[(i, i)] += op.sigma_n().powi(2);
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::invalid("marginal covariance is not positive definite"))?;
        let e = DVector::from_iterator(m, y.data().iter().zip(mean.data()).map(|(p, q)| p - q));
        let quad = e.dot(&chol.solve(&e));
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (quad + logdet + m as f64 * (2.0 * std::f64::consts::PI).ln()))
    }
}

/// `1 − ᾱ_t`, which must be positive for the transition density to exist.
pub(crate) fn transition_variance(schedule: &NoiseSchedule, t_next: u32) -> Result<f64> {
    schedule.check(t_next)?;
    let v = 1.0 - schedule.alpha_bar(t_next);
    if !(v > 0.0) {
        return Err(Error::invalid("transition density needs t_next > 0"));
    }
    Ok(v)
}

impl Prior for AnalyticGaussianPrior {
    fn kind(&self) -> PriorKind {
        PriorKind::Analytic
    }

    fn latent_shape(&self) -> Vec<usize> {
        vec![self.latent_dim()]
    }

    fn image_shape(&self) -> Option<Vec<usize>> {
        Some(self.image_shape.clone())
    }

    fn cond_dim(&self) -> usize {
        self.cond_map.ncols()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn timesteps(&self) -> Option<Vec<u32>> {
        None
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encode_image(x)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decode_latent(z)
    }

    fn consistency(&self, z_t: &Tensor, t: u32, c: &Tensor) -> Result<Tensor> {
        self.consistency_map(z_t, t, c)
    }

    fn grad_logcond(
        &self,
        z_next: &Tensor,
        z_prev: &Tensor,
        t_prev: u32,
        t_next: u32,
        c: &Tensor,
    ) -> Result<Option<Tensor>> {
        self.grad_logcond_closed(z_next, z_prev, t_prev, t_next, c)
            .map(Some)
    }

    fn as_analytic(&self) -> Option<&AnalyticGaussianPrior> {
        Some(self)
    }
}
