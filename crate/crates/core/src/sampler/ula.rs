//! Unadjusted Langevin algorithm, the explicit Euler–Maruyama baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::DegradationOp;
use crate::sae::AnalyticGaussianPrior;
use crate::tensor::Tensor;

/// Iterates whose norm exceeds this are declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UlaOutcome {
    pub x: Tensor,
    /// Running mean of the iterates after burn-in.
    pub mean: Option<Tensor>,
    pub iterations: usize,
    pub diverged: bool,
    pub diverged_at: Option<usize>,
}

/// `x ← x + step (∇log p(y|x) + ∇log p(x|c)) + √(2 step) ε`, from `A† y`,
/// averaging the iterates after the first tenth.
pub fn ula_run<R, F>(
    y: &Tensor,
    op: &DegradationOp,
    prior_score: F,
    step: f64,
    n_iter: usize,
    rng: &mut R,
) -> Result<UlaOutcome>
where
    R: Rng + ?Sized,
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x0 = op.pseudoinverse(y)?;
    ula_run_from(y, op, prior_score, step, n_iter, x0, n_iter / 10, rng)
}

#[allow(clippy::too_many_arguments)]
pub fn ula_run_from<R, F>(
    y: &Tensor,
    op: &DegradationOp,
    prior_score: F,
    step: f64,
    n_iter: usize,
    x0: Tensor,
    burn_in: usize,
    rng: &mut R,
) -> Result<UlaOutcome>
where
    R: Rng + ?Sized,
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("ULA step must be positive, got {step}")));
    }
    if !op.is_linear() {
        return Err(Error::NonlinearOperator("Langevin likelihood gradient"));
    }
    let inv_s2 = 1.0 / op.sigma_n().powi(2);
    let noise = (2.0 * step).sqrt();
    let mut x = x0;
    let mut sum: Option<Tensor> = None;
    let mut count = 0usize;
    for it in 0..n_iter {
        let resid = op.apply(&x)?.sub(y);
        let mut grad = op.adjoint(&resid)?.scale(-inv_s2);
        grad.axpy(1.0, &prior_score(&x)?);
        x.axpy(step, &grad);
        x.axpy(noise, &Tensor::randn(x.shape(), rng));
        let n = x.norm();
        if !(n <= DIVERGENCE_NORM) {
            return Ok(UlaOutcome {
                x,
                mean: None,
                iterations: it + 1,
                diverged: true,
                diverged_at: Some(it + 1),
            });
        }
        if it >= burn_in {
            match sum.as_mut() {
                Some(s) => s.axpy(1.0, &x),
                None => sum = Some(x.clone()),
            }
            count += 1;
        }
    }
    Ok(UlaOutcome {
        x,
        mean: sum.map(|s| s.scale(1.0 / count as f64)),
        iterations: n_iter,
        diverged: false,
        diverged_at: None,
    })
}

/// Largest eigenvalue of `AᵀA`, exact from the transfer function when the
/// operator is a convolution, else by power iteration.
pub fn normal_operator_norm(op: &DegradationOp, shape: &[usize]) -> Result<f64> {
    if let [_, h, w] = *shape {
        if let Some(tr) = op.operator().transfer(h, w) {
            return Ok(tr?.iter().map(|t| t.norm_sqr()).fold(0.0, f64::max));
        }
    }
    let mut v = Tensor::from_fn(shape, |i| 1.0 + 0.01 * ((i * 7919) % 13) as f64);
    let mut lambda = 0.0;
    for _ in 0..500 {
        let nv = v.norm();
        if nv == 0.0 {
            return Ok(0.0);
        }
        v = v.scale(1.0 / nv);
        let av = op.adjoint(&op.apply(&v)?)?;
        let next = v.dot(&av);
        let done = (next - lambda).abs() <= 1e-12 * next.abs();
        lambda = next;
        v = av;
        if done {
            break;
        }
    }
    Ok(lambda)
}

/// Gradient Lipschitz constant of the Gaussian potential
/// `U(x) = ‖A x − y‖²/(2σ²) − log p(x | c)`, i.e. the largest eigenvalue of
/// its Hessian `AᵀA/σ² + Qᵀ S⁻¹ Q`. Explicit Euler steps above `2/L` diverge.
pub fn lipschitz_constant(op: &DegradationOp, prior: &AnalyticGaussianPrior) -> Result<f64> {
    if !prior.is_full_basis() {
        return Err(Error::invalid("the prior potential needs a complete latent basis"));
    }
    let n = prior.image_len();
    if n > DENSE_LIMIT {
        // upper bound from the two terms separately
        let s_min = prior.variances().iter().cloned().fold(f64::INFINITY, f64::min);
        return Ok(normal_operator_norm(op, prior.image_shape())? / op.sigma_n().powi(2) + 1.0 / s_min);
    }
    let a = op.to_dense(prior.image_shape())?;
    let b = prior.synthesis_matrix()?;
    let inv_s = nalgebra::DVector::from_iterator(n, prior.variances().iter().map(|s| 1.0 / s));
    let h = a.transpose() * &a / op.sigma_n().powi(2) + &b * nalgebra::DMatrix::from_diagonal(&inv_s) * b.transpose();
    let eig = h.symmetric_eigenvalues();
    Ok(eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Largest image size for which the Hessian is formed densely.
const DENSE_LIMIT: usize = 1024;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{make_gaussian_kernel, ResampleMode};
    use crate::sae::AnalyticPriorSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn operator_norm_estimates() {
        let op = DegradationOp::identity(0.1).unwrap();
        assert!((normal_operator_norm(&op, &[1, 8, 8]).unwrap() - 1.0).abs() < 1e-12);
        // avgpool: AᵀA has eigenvalue 1/s² on constant blocks
        let op = DegradationOp::downsample(2, ResampleMode::Avgpool, 0.1).unwrap();
        let l = normal_operator_norm(&op, &[1, 8, 8]).unwrap();
        assert!((l - 0.25).abs() < 1e-9, "{l}");
        let op = DegradationOp::conv(make_gaussian_kernel(3, 0.5).unwrap(), 0.1).unwrap();
        let l = normal_operator_norm(&op, &[1, 8, 8]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stays_at_mode_without_noise_or_gradient() {
        let spec = AnalyticPriorSpec::default();
        let p = spec.build(&[1, 4, 4]).unwrap();
        let op = DegradationOp::identity(0.1).unwrap();
        let c = Tensor::zeros(&[4]);
        let y = p.mean(&c).unwrap();
        // the posterior mode equals y when y is the prior mean
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let score = |x: &Tensor| p.score(x, &c);
        let out = ula_run_from(&y, &op, score, 1e-300, 10, y.clone(), 0, &mut rng).unwrap();
        assert!(out.x.sub(&y).max_abs() < 1e-12);
        assert!(!out.diverged);
    }

    #[test]
    fn divergence_above_stability_bound() {
        let p = AnalyticPriorSpec::default().build(&[1, 8, 8]).unwrap();
        let op = DegradationOp::identity(0.05).unwrap();
        let c = Tensor::zeros(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = op.apply(&p.sample(&c, &mut rng).unwrap()).unwrap();
        let l = lipschitz_constant(&op, &p).unwrap();
        let score = |x: &Tensor| p.score(x, &c);
        let out = ula_run(&y, &op, score, 10.0 / l, 1000, &mut rng).unwrap();
        assert!(out.diverged);
        let out = ula_run(&y, &op, score, 1.0 / l, 1000, &mut rng).unwrap();
        assert!(!out.diverged);
        // identity operator: the Hessian is diagonal in the DCT basis
        let s_min = p.variances().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((l - (400.0 + 1.0 / s_min)).abs() < 1e-9 * l);
    }
}
