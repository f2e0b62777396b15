use crate::error::Result;
use crate::tensor::Tensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Peak signal-to-noise ratio in dB for images scaled to `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a.sub(b).norm_sq() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn examples() {
        let a = Tensor::full(&[1, 2, 2], 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = Tensor::full(&[1, 2, 2], 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Tensor::rand_unit(&[3, 6, 5], &mut rng);
            let b = Tensor::rand_unit(&[3, 6, 5], &mut rng);
            let mut s = 0.0;
            for (x, y) in a.data().iter().zip(b.data()) {
                s += (x - y) * (x - y);
            }
            let want = 10.0 * (90.0 / s).log10();
            assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
        }
    }
}
