use super::{ForwardOperator, OpKind, SolverHint};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel mask shared by all channels. The measurement keeps the image
/// layout, with zeros at unobserved pixels.
#[derive(Clone, Debug)]
pub struct Mask {
    mask: Tensor,
}

impl Mask {
    /// `mask` is `(H, W)` (or `(1, H, W)`) with entries in `{0, 1}`.
    pub fn new(mask: Tensor) -> Result<Self> {
        let mask = match mask.shape() {
            &[_, _] => mask,
            &[1, h, w] => mask.reshape(&[h, w])?,
            s => return Err(Error::shape(format!("mask must be (H,W), got {s:?}"))),
        };
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(Self { mask })
    }

    /// All-ones mask with a `box_h x box_w` hole at `(top, left)`.
    pub fn box_mask(
        h: usize,
        w: usize,
        top: usize,
        left: usize,
        box_h: usize,
        box_w: usize,
    ) -> Result<Tensor> {
        if top + box_h > h || left + box_w > w {
            return Err(Error::invalid("box exceeds image bounds"));
        }
        Ok(Tensor::from_fn(&[h, w], |idx| {
            let (i, j) = (idx / w, idx % w);
            let inside = (top..top + box_h).contains(&i) && (left..left + box_w).contains(&j);
            if inside {
                0.0
            } else {
                1.0
            }
        }))
    }

    pub fn weights(&self) -> &Tensor {
        &self.mask
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (c, h, w) = x.image_dims()?;
        if self.mask.shape() != [h, w] {
            return Err(Error::shape(format!(
                "mask {:?} does not match image plane {h}x{w}",
                self.mask.shape()
            )));
        }
        Ok((c, h, w))
    }

    fn multiply(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.check(x)?;
        let m = self.mask.data();
        let plane = h * w;
        Ok(Tensor::from_fn(&[c, h, w], |idx| x.data()[idx] * m[idx % plane]))
    }
}

pub fn mask_apply(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    Mask::new(m.clone())?.multiply(x)
}

pub fn mask_pseudoinverse(y: &Tensor, m: &Tensor) -> Result<Tensor> {
    Mask::new(m.clone())?.multiply(y)
}

impl ForwardOperator for Mask {
    fn kind(&self) -> OpKind {
        OpKind::Mask
    }

    fn hint(&self) -> SolverHint {
        SolverHint::Diagonal
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            &[_, h, w] if self.mask.shape() == [h, w] => Ok(input.to_vec()),
            s => Err(Error::shape(format!(
                "mask {:?} incompatible with input {s:?}",
                self.mask.shape()
            ))),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.multiply(x)
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        self.multiply(y)
    }

    fn pseudoinverse(&self, y: &Tensor) -> Result<Tensor> {
        self.multiply(y)
    }

    fn diagonal(&self) -> Option<&Tensor> {
        Some(&self.mask)
    }
}
