//! Forward degradation operators `y = A x + n`.
//!
//! Every operator implements [`ForwardOperator`]; a [`DegradationOp`] pairs
//! one with the measurement noise level. Convolutions are circular so that
//! the frequency-domain proximal step is exact; real pipelines that pad
//! with zeros will see boundary mismatch.

mod compose;
mod conv;
pub mod kernel;
mod mask;
mod phase;
pub mod resample;

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use compose::Compose;
pub use conv::{conv_adjoint, conv_apply, conv_apply_direct, Conv, PINV_FLOOR};
pub use kernel::{make_gaussian_kernel, make_motion_kernel, motion_path, ConvKernel, MotionPath};
pub use mask::{mask_apply, mask_pseudoinverse, Mask};
pub use phase::{phase_retrieval_apply, PhaseRetrieval};
pub use resample::{
    downsample_adjoint, downsample_apply, downsample_pseudoinverse, Downsample, ResampleMode,
    SpectralWindow,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv,
    Downsample,
    Mask,
    Compose,
    PhaseRetrieval,
}

/// Which proximal solver can treat the operator exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverHint {
    FreqDiagonal,
    Diagonal,
    GeneralLinear,
    Nonlinear,
}

pub trait ForwardOperator: Send + Sync + fmt::Debug {
    fn kind(&self) -> OpKind;

    fn hint(&self) -> SolverHint;

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn apply(&self, x: &Tensor) -> Result<Tensor>;

    fn adjoint(&self, _y: &Tensor) -> Result<Tensor> {
        Err(Error::NonlinearOperator("adjoint"))
    }

    fn pseudoinverse(&self, _y: &Tensor) -> Result<Tensor> {
        Err(Error::NonlinearOperator("pseudoinverse"))
    }

    /// Gradient of `x -> <g, A(x)>` at `x`. Equals the adjoint for linear operators.
    fn vjp(&self, _x: &Tensor, g: &Tensor) -> Result<Tensor> {
        self.adjoint(g)
    }

    /// Per-bin transfer function on an `h x w` grid, for operators diagonal
    /// in the Fourier domain.
    fn transfer(&self, _h: usize, _w: usize) -> Option<Result<Vec<Complex64>>> {
        None
    }

    /// Per-pixel `(H, W)` weights, for operators diagonal in pixel space.
    fn diagonal(&self) -> Option<&Tensor> {
        None
    }

    fn is_linear(&self) -> bool {
        self.hint() != SolverHint::Nonlinear
    }
}

/// A forward operator together with its measurement noise level `sigma_n`.
#[derive(Clone, Debug)]
pub struct DegradationOp {
    op: Arc<dyn ForwardOperator>,
    sigma_n: f64,
}

impl DegradationOp {
    pub fn new(op: Arc<dyn ForwardOperator>, sigma_n: f64) -> Result<Self> {
        if !(sigma_n > 0.0) || !sigma_n.is_finite() {
            return Err(Error::invalid(format!("sigma_n must be positive, got {sigma_n}")));
        }
        Ok(Self { op, sigma_n })
    }

    pub fn identity(sigma_n: f64) -> Result<Self> {
        Self::new(Arc::new(Conv::new(ConvKernel::identity())), sigma_n)
    }

    pub fn conv(kernel: ConvKernel, sigma_n: f64) -> Result<Self> {
        Self::new(Arc::new(Conv::new(kernel)), sigma_n)
    }

    pub fn downsample(factor: usize, mode: ResampleMode, sigma_n: f64) -> Result<Self> {
        Self::new(Arc::new(Downsample::new(factor, mode)?), sigma_n)
    }

    pub fn mask(mask: Tensor, sigma_n: f64) -> Result<Self> {
        Self::new(Arc::new(Mask::new(mask)?), sigma_n)
    }

    pub fn phase_retrieval(sigma_n: f64) -> Result<Self> {
        Self::new(Arc::new(PhaseRetrieval), sigma_n)
    }

    /// Children are applied in list order: `compose([a, b])` maps `x` to `b(a(x))`.
    pub fn compose(children: Vec<Arc<dyn ForwardOperator>>, sigma_n: f64) -> Result<Self> {
        Self::new(Arc::new(Compose::new(children)?), sigma_n)
    }

    pub fn operator(&self) -> &Arc<dyn ForwardOperator> {
        &self.op
    }

    pub fn sigma_n(&self) -> f64 {
        self.sigma_n
    }

    pub fn with_sigma(&self, sigma_n: f64) -> Result<Self> {
        Self::new(self.op.clone(), sigma_n)
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }

    pub fn hint(&self) -> SolverHint {
        self.op.hint()
    }

    pub fn is_linear(&self) -> bool {
        self.op.is_linear()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.op.apply(x)
    }

    pub fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        self.op.adjoint(y)
    }

    pub fn pseudoinverse(&self, y: &Tensor) -> Result<Tensor> {
        self.op.pseudoinverse(y)
    }

    pub fn vjp(&self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        self.op.vjp(x, g)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.op.output_shape(input)
    }

    /// Dense matrix of a linear operator acting on tensors of `shape`,
    /// assembled column by column. Only sensible for small problems.
    pub fn to_dense(&self, shape: &[usize]) -> Result<nalgebra::DMatrix<f64>> {
        if !self.is_linear() {
            return Err(Error::NonlinearOperator("dense matrix"));
        }
        let n: usize = shape.iter().product();
        let m: usize = self.output_shape(shape)?.iter().product();
        let mut a = nalgebra::DMatrix::zeros(m, n);
        let mut e = Tensor::zeros(shape);
        for j in 0..n {
            e.data_mut()[j] = 1.0;
            let col = self.apply(&e)?;
            e.data_mut()[j] = 0.0;
            for (i, v) in col.data().iter().enumerate() {
                a[(i, j)] = *v;
            }
        }
        Ok(a)
    }

    /// `‖A x - y‖`
    pub fn residual(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let ax = self.apply(x)?;
        ax.same_shape(y)?;
        Ok(ax.sub(y).norm())
    }
}

/// Kernel description used by configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    Gaussian { size: usize, sigma: f64 },
    Motion { seed: u64, size: usize, intensity: f64 },
    Identity,
    File { path: String },
}

impl KernelSpec {
    pub fn build(&self) -> Result<ConvKernel> {
        match self {
            KernelSpec::Gaussian { size, sigma } => make_gaussian_kernel(*size, *sigma),
            KernelSpec::Motion {
                seed,
                size,
                intensity,
            } => make_motion_kernel(*seed, *size, *intensity),
            KernelSpec::Identity => Ok(ConvKernel::identity()),
            KernelSpec::File { path } => {
                ConvKernel::new(crate::harness::tensor_io::load_tensor(path)?)
            }
        }
    }
}

/// Operator description used by configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    Identity,
    Conv {
        kernel: KernelSpec,
    },
    Downsample {
        factor: usize,
        mode: ResampleMode,
    },
    /// Box mask: the rectangle `[top, top+height) x [left, left+width)` is unobserved.
    BoxMask {
        height: usize,
        width: usize,
        top: usize,
        left: usize,
        box_height: usize,
        box_width: usize,
    },
    MaskFile {
        path: String,
    },
    PhaseRetrieval,
    Compose {
        children: Vec<OperatorSpec>,
    },
}

impl OperatorSpec {
    pub fn build_operator(&self) -> Result<Arc<dyn ForwardOperator>> {
        Ok(match self {
            OperatorSpec::Identity => Arc::new(Conv::new(ConvKernel::identity())),
            OperatorSpec::Conv { kernel } => Arc::new(Conv::new(kernel.build()?)),
            OperatorSpec::Downsample { factor, mode } => Arc::new(Downsample::new(*factor, *mode)?),
            OperatorSpec::BoxMask {
                height,
                width,
                top,
                left,
                box_height,
                box_width,
            } => Arc::new(Mask::new(Mask::box_mask(
                *height,
                *width,
                *top,
                *left,
                *box_height,
                *box_width,
            )?)?),
            OperatorSpec::MaskFile { path } => {
                let m = crate::harness::tensor_io::load_tensor(path)?;
                Arc::new(Mask::new(m)?)
            }
            OperatorSpec::PhaseRetrieval => Arc::new(PhaseRetrieval),
            OperatorSpec::Compose { children } => Arc::new(Compose::new(
                children
                    .iter()
                    .map(|c| c.build_operator())
                    .collect::<Result<Vec<_>>>()?,
            )?),
        })
    }

    pub fn build(&self, sigma_n: f64) -> Result<DegradationOp> {
        DegradationOp::new(self.build_operator()?, sigma_n)
    }
}
