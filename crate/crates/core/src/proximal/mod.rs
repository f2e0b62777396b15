//! Proximal steps on the data-fidelity term
//! `g_y(x) = ‖y - A x‖² / (2 sigma_n²)`:
//!
//! `prox_{delta g_y}(u) = argmin_x delta g_y(x) + ½‖x - u‖²`.
//!
//! For linear `A` the minimizer solves the normal equations
//! `(delta AᵀA + sigma_n² I) x = delta Aᵀy + sigma_n² u`.

mod adam;
mod cg;
mod diag;
mod freq;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::operators::{DegradationOp, SolverHint};
use crate::tensor::Tensor;

pub use adam::{prox_nonlinear, AdamProx, AdamSettings};
pub use cg::{prox_cg, CgProx, CG_DEFAULT_MAX_ITER, CG_DEFAULT_TOL};
pub use diag::{prox_diag, DiagProx};
pub use freq::{prox_freq, FreqProx};

#[derive(Clone, Debug)]
pub struct ProxRequest<'a> {
    pub u: &'a Tensor,
    pub y: &'a Tensor,
    pub op: &'a DegradationOp,
    pub delta: f64,
    pub sigma_n: f64,
}

impl<'a> ProxRequest<'a> {
    /// Request using the operator's own noise level. `delta = 0` is accepted
    /// and yields `u`.
    pub fn new(u: &'a Tensor, y: &'a Tensor, op: &'a DegradationOp, delta: f64) -> Result<Self> {
        Self::with_sigma(u, y, op, delta, op.sigma_n())
    }

    pub fn with_sigma(
        u: &'a Tensor,
        y: &'a Tensor,
        op: &'a DegradationOp,
        delta: f64,
        sigma_n: f64,
    ) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::invalid(format!("prox step must be >= 0, got {delta}")));
        }
        if !(sigma_n > 0.0) || !sigma_n.is_finite() {
            return Err(Error::invalid(format!("sigma_n must be positive, got {sigma_n}")));
        }
        let range = op.operator().output_shape(u.shape())?;
        if range != y.shape() {
            return Err(Error::shape(format!(
                "measurement {:?} does not match operator range {range:?}",
                y.shape()
            )));
        }
        Ok(Self {
            u,
            y,
            op,
            delta,
            sigma_n,
        })
    }

    /// `delta ‖y - A x‖² / (2 sigma²) + ½‖x - u‖²`
    pub fn objective(&self, x: &Tensor) -> Result<f64> {
        let r = self.op.residual(x, self.y)?;
        Ok(self.delta * r * r / (2.0 * self.sigma_n * self.sigma_n) + 0.5 * x.sub(self.u).norm_sq())
    }

    /// `(delta AᵀA + sigma² I) x`
    pub fn normal_apply(&self, x: &Tensor) -> Result<Tensor> {
        let s2 = self.sigma_n * self.sigma_n;
        let mut out = self.op.adjoint(&self.op.apply(x)?)?.scale(self.delta);
        out.axpy(s2, x);
        Ok(out)
    }

    /// `delta Aᵀy + sigma² u`
    pub fn normal_rhs(&self) -> Result<Tensor> {
        let mut rhs = self.op.adjoint(self.y)?.scale(self.delta);
        rhs.axpy(self.sigma_n * self.sigma_n, self.u);
        Ok(rhs)
    }

    /// Relative residual of the normal equations at `x`.
    pub fn normal_residual(&self, x: &Tensor) -> Result<f64> {
        let rhs = self.normal_rhs()?;
        let r = self.normal_apply(x)?.sub(&rhs).norm();
        let scale = rhs.norm();
        Ok(if scale > 0.0 { r / scale } else { r })
    }
}

#[derive(Clone, Debug)]
pub struct ProxOutcome {
    pub x: Tensor,
    pub objective: f64,
    /// Objective at the starting point `u`.
    pub start_objective: f64,
    /// Relative normal-equation residual for iterative linear solvers.
    pub residual: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ProxOutcome {
    pub(crate) fn exact(req: &ProxRequest<'_>, x: Tensor) -> Result<Self> {
        Ok(Self {
            objective: req.objective(&x)?,
            start_objective: req.objective(req.u)?,
            x,
            residual: None,
            iterations: 0,
            converged: true,
        })
    }
}

/// A strategy for evaluating the proximal step.
pub trait ProxSolver: Send + Sync {
    fn name(&self) -> &'static str;

    fn solve(&self, req: &ProxRequest<'_>) -> Result<ProxOutcome>;
}

/// Proximal solvers keyed by name.
#[derive(Clone)]
pub struct ProxRegistry {
    solvers: BTreeMap<String, Arc<dyn ProxSolver>>,
}

impl std::fmt::Debug for ProxRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.solvers.keys()).finish()
    }
}

impl Default for ProxRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register(Arc::new(FreqProx));
        reg.register(Arc::new(DiagProx));
        reg.register(Arc::new(CgProx::default()));
        reg.register(Arc::new(AdamProx::default()));
        reg
    }
}

impl ProxRegistry {
    pub fn empty() -> Self {
        Self {
            solvers: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, solver: Arc<dyn ProxSolver>) {
        self.solvers.insert(solver.name().to_string(), solver);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.solvers.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ProxSolver>> {
        self.solvers
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownName {
                kind: "prox solver",
                name: name.to_string(),
            })
    }

    /// Default solver for an operator's structure.
    pub fn for_hint(&self, hint: SolverHint) -> Result<Arc<dyn ProxSolver>> {
        self.get(match hint {
            SolverHint::FreqDiagonal => "freq",
            SolverHint::Diagonal => "diag",
            SolverHint::GeneralLinear => "cg",
            SolverHint::Nonlinear => "adam",
        })
    }

    /// Resolve `"auto"` or a solver name for the given operator.
    pub fn resolve(&self, name: &str, op: &DegradationOp) -> Result<Arc<dyn ProxSolver>> {
        if name == "auto" {
            self.for_hint(op.hint())
        } else {
            self.get(name)
        }
    }
}
