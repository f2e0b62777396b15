use std::sync::Arc;

use rustfft::num_complex::Complex64;

use super::{ForwardOperator, OpKind, SolverHint};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Chain of operators applied in list order.
#[derive(Clone, Debug)]
pub struct Compose {
    children: Vec<Arc<dyn ForwardOperator>>,
}

impl Compose {
    pub fn new(children: Vec<Arc<dyn ForwardOperator>>) -> Result<Self> {
        if children.is_empty() {
            return Err(Error::invalid("compose needs at least one operator"));
        }
        Ok(Self { children })
    }

    pub fn children(&self) -> &[Arc<dyn ForwardOperator>] {
        &self.children
    }
}

impl ForwardOperator for Compose {
    fn kind(&self) -> OpKind {
        OpKind::Compose
    }

    fn hint(&self) -> SolverHint {
        let hints: Vec<_> = self.children.iter().map(|c| c.hint()).collect();
        if hints.contains(&SolverHint::Nonlinear) {
            SolverHint::Nonlinear
        } else if hints.iter().all(|&h| h == SolverHint::FreqDiagonal) {
            SolverHint::FreqDiagonal
        } else if hints.len() == 1 {
            hints[0]
        } else {
            SolverHint::GeneralLinear
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.children
            .iter()
            .try_fold(input.to_vec(), |shape, c| c.output_shape(&shape))
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.children
            .iter()
            .try_fold(x.clone(), |acc, c| c.apply(&acc))
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        self.children
            .iter()
            .rev()
            .try_fold(y.clone(), |acc, c| c.adjoint(&acc))
    }

    /// Product of the children's pseudoinverses in reverse order. This is a
    /// right inverse on the range when every child has one, not the
    /// Moore-Penrose inverse of the chain in general.
    fn pseudoinverse(&self, y: &Tensor) -> Result<Tensor> {
        self.children
            .iter()
            .rev()
            .try_fold(y.clone(), |acc, c| c.pseudoinverse(&acc))
    }

    fn vjp(&self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        let mut inputs = Vec::with_capacity(self.children.len());
        let mut cur = x.clone();
        for c in &self.children {
            let next = c.apply(&cur)?;
            inputs.push(cur);
            cur = next;
        }
        let mut grad = g.clone();
        for (c, input) in self.children.iter().zip(&inputs).rev() {
            grad = c.vjp(input, &grad)?;
        }
        Ok(grad)
    }

    fn transfer(&self, h: usize, w: usize) -> Option<Result<Vec<Complex64>>> {
        if self.hint() != SolverHint::FreqDiagonal {
            return None;
        }
        let mut acc = vec![Complex64::new(1.0, 0.0); h * w];
        for c in &self.children {
            match c.transfer(h, w)? {
                Ok(t) => acc.iter_mut().zip(t).for_each(|(a, b)| *a *= b),
                Err(e) => return Some(Err(e)),
            }
        }
        Some(Ok(acc))
    }

    fn diagonal(&self) -> Option<&Tensor> {
        match self.children.as_slice() {
            [only] => only.diagonal(),
            _ => None,
        }
    }
}
