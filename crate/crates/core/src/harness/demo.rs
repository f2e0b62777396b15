//! The bundled procedural test image.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale `size x size` scene in `[0, 1]`: a shaded background, a bright
/// disk, a dark square, a soft blob and a patch of stripes.
pub fn test_image(size: usize) -> Result<Tensor> {
    if size < 8 {
        return Err(Error::invalid(format!("test image needs size >= 8, got {size}")));
    }
    let n = size as f64;
    Ok(Tensor::from_fn(&[1, size, size], |idx| {
        let (i, j) = ((idx / size) as f64 / n, (idx % size) as f64 / n);
        let mut v = 0.25 + 0.3 * j + 0.1 * i;
        let disk = ((i - 0.3).powi(2) + (j - 0.65).powi(2)).sqrt();
        if disk < 0.18 {
            v = 0.9;
        }
        if (0.55..0.85).contains(&i) && (0.12..0.42).contains(&j) {
            v = 0.1;
        }
        v += 0.25 * (-((i - 0.72).powi(2) + (j - 0.72).powi(2)) / 0.01).exp();
        if (0.1..0.35).contains(&i) && (0.1..0.35).contains(&j) {
            v += 0.15 * (2.0 * std::f64::consts::PI * 6.0 * j).sin();
        }
        v.clamp(0.0, 1.0)
    }))
}
