//! Split-step Langevin sampler with a stochastic auto-encoder prior step and
//! an exact proximal likelihood step, plus an explicit Langevin baseline.

pub mod delta;
pub mod ula;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::DegradationOp;
use crate::proximal::{ProxRegistry, ProxRequest, ProxSolver};
use crate::sae::{consistency_apply, encode_stochastic, Prior};
use crate::tensor::Tensor;

pub use delta::{
    delta_schedule, variance_matched_delta, Explicit, StepContext, StepSizeRegistry, StepSizeRule,
    Task,
};
pub use ula::{lipschitz_constant, ula_run, UlaOutcome};

/// Timesteps of the 4- and 8-step consistency samplers.
pub fn default_timesteps(n: usize) -> Result<Vec<u32>> {
    match n {
        4 => Ok(vec![999, 749, 499, 249]),
        8 => Ok(vec![999, 874, 749, 624, 499, 374, 249, 124]),
        _ => Err(Error::invalid(format!("no default timesteps for N = {n}, use 4 or 8"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatinoConfig {
    /// Number of steps when `timesteps` is not given.
    pub steps: usize,
    pub timesteps: Option<Vec<u32>>,
    pub task: Task,
    /// Named step-size rule replacing the task default.
    pub delta_rule: Option<String>,
    /// Explicit `δ_k`, one per step. Takes precedence over every rule.
    pub delta_overrides: Option<Vec<f64>>,
    /// Clamp decoded images to `[0, 1]` before the proximal step.
    pub clamp: bool,
    /// Proximal solver name, or `auto` to pick from the operator structure.
    pub prox: String,
}

impl Default for LatinoConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            timesteps: None,
            task: Task::GaussDeblur,
            delta_rule: None,
            delta_overrides: None,
            clamp: false,
            prox: "auto".into(),
        }
    }
}

impl LatinoConfig {
    pub fn resolved_timesteps(&self) -> Result<Vec<u32>> {
        let ts = match &self.timesteps {
            Some(ts) => ts.clone(),
            None => default_timesteps(self.steps)?,
        };
        if ts.is_empty() {
            return Err(Error::Config("at least one timestep is required".into()));
        }
        if ts.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!("timesteps must be strictly decreasing: {ts:?}")));
        }
        if let Some(d) = &self.delta_overrides {
            if d.len() != ts.len() {
                return Err(Error::Config(format!(
                    "{} step sizes for {} timesteps",
                    d.len(),
                    ts.len()
                )));
            }
            if d.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::Config("step sizes must be finite and >= 0".into()));
            }
        }
        Ok(ts)
    }
}

/// Per-step record of one chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: u32,
    pub alpha_bar: f64,
    pub delta: f64,
    /// `‖A u − y‖` at the decoded image.
    pub residual: f64,
    /// Proximal objective at the returned iterate.
    pub objective: f64,
    pub prox_iterations: usize,
    pub prox_converged: bool,
    pub input_checksum: u64,
    pub output_checksum: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub start_checksum: u64,
    pub steps: Vec<StepRecord>,
    pub final_x: Option<Tensor>,
}

impl ChainTrace {
    pub fn is_complete(&self, n: usize) -> bool {
        self.steps.len() == n
            && self.final_x.is_some()
            && self.steps.iter().all(|s| {
                s.delta.is_finite() && s.residual.is_finite() && s.objective.is_finite()
            })
    }
}

/// A chain that stopped early, with the steps it managed to complete.
#[derive(Debug)]
pub struct ChainFailure {
    pub partial: ChainTrace,
    pub error: Error,
}

impl fmt::Display for ChainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "chain aborted after {} completed steps: {}",
            self.partial.steps.len(),
            self.error
        )
    }
}

impl std::error::Error for ChainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<ChainFailure> for Error {
    fn from(f: ChainFailure) -> Self {
        f.error.at("sampler")
    }
}

/// Everything a chain produced, including the noisy latents it visited.
#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub x: Tensor,
    pub trace: ChainTrace,
    /// `(z_{t_k}, t_k)` for every step in order.
    pub latents: Vec<(Tensor, u32)>,
}

/// A validated, ready-to-run chain configuration.
#[derive(Clone)]
pub struct ChainPlan {
    pub timesteps: Vec<u32>,
    pub rule: Arc<dyn StepSizeRule>,
    pub solver: Arc<dyn ProxSolver>,
    pub clamp: bool,
}

impl fmt::Debug for ChainPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChainPlan")
            .field("timesteps", &self.timesteps)
            .field("rule", &self.rule.name())
            .field("solver", &self.solver.name())
            .field("clamp", &self.clamp)
            .finish()
    }
}

/// Registries of proximal solvers and step-size rules used to plan chains.
#[derive(Debug, Default)]
pub struct Sampler {
    pub prox: ProxRegistry,
    pub rules: StepSizeRegistry,
}

impl Sampler {
    pub fn plan(&self, cfg: &LatinoConfig, op: &DegradationOp, prior: &dyn Prior) -> Result<ChainPlan> {
        let timesteps = cfg.resolved_timesteps()?;
        if let Some(t) = timesteps.iter().find(|t| !prior.supports_timestep(**t)) {
            return Err(Error::Config(format!("prior does not support timestep {t}")));
        }
        let rule: Arc<dyn StepSizeRule> = if let Some(d) = &cfg.delta_overrides {
            Arc::new(Explicit { deltas: d.clone() })
        } else if let Some(name) = &cfg.delta_rule {
            self.rules.get(name)?
        } else {
            self.rules.for_task(cfg.task)?
        };
        Ok(ChainPlan {
            timesteps,
            rule,
            solver: self.prox.resolve(&cfg.prox, op)?,
            clamp: cfg.clamp,
        })
    }

    pub fn run<R: Rng + ?Sized>(
        &self,
        y: &Tensor,
        op: &DegradationOp,
        prior: &dyn Prior,
        c: &Tensor,
        cfg: &LatinoConfig,
        rng: &mut R,
    ) -> Result<(Tensor, ChainTrace)> {
        let plan = self.plan(cfg, op, prior)?;
        let x0 = warm_start(y, op)?;
        let out = run_chain(y, op, prior, c, &plan, x0, rng)?;
        Ok((out.x, out.trace))
    }
}

/// Observation-informed initial point `A† y`.
pub fn warm_start(y: &Tensor, op: &DegradationOp) -> Result<Tensor> {
    op.pseudoinverse(y).map_err(|e| e.at("warm start"))
}

/// Run one chain with the default registries from `x0 = A† y`.
pub fn latino_run<R: Rng + ?Sized>(
    y: &Tensor,
    op: &DegradationOp,
    prior: &dyn Prior,
    c: &Tensor,
    cfg: &LatinoConfig,
    rng: &mut R,
) -> Result<(Tensor, ChainTrace)> {
    Sampler::default().run(y, op, prior, c, cfg, rng)
}

/// Run one chain from an explicit starting image.
pub fn run_chain<R: Rng + ?Sized>(
    y: &Tensor,
    op: &DegradationOp,
    prior: &dyn Prior,
    c: &Tensor,
    plan: &ChainPlan,
    x0: Tensor,
    rng: &mut R,
) -> std::result::Result<ChainOutput, ChainFailure> {
    let mut trace = ChainTrace {
        start_checksum: x0.checksum(),
        ..Default::default()
    };
    let mut latents = Vec::with_capacity(plan.timesteps.len());
    let mut x = x0;
    for (i, &t) in plan.timesteps.iter().enumerate() {
        let k = i + 1;
        match step(y, op, prior, c, plan, &x, k, t, rng) {
            Ok((next, z, record)) => {
                trace.steps.push(record);
                latents.push((z, t));
                x = next;
            }
            Err(error) => return Err(ChainFailure { partial: trace, error }),
        }
    }
    trace.final_x = Some(x.clone());
    Ok(ChainOutput { x, trace, latents })
}

#[allow(clippy::too_many_arguments)]
fn step<R: Rng + ?Sized>(
    y: &Tensor,
    op: &DegradationOp,
    prior: &dyn Prior,
    c: &Tensor,
    plan: &ChainPlan,
    x: &Tensor,
    k: usize,
    t: u32,
    rng: &mut R,
) -> Result<(Tensor, Tensor, StepRecord)> {
    let z = encode_stochastic(x, t, prior, rng).map_err(|e| e.at("encode"))?;
    let z0 = consistency_apply(&z, t, c, prior).map_err(|e| e.at("consistency"))?;
    let mut u = prior.decode(&z0).map_err(|e| e.at("decode"))?;
    if u.shape() != x.shape() {
        return Err(Error::shape(format!(
            "decoded shape {:?} differs from image shape {:?}",
            u.shape(),
            x.shape()
        )));
    }
    if plan.clamp {
        u = u.clamp(0.0, 1.0);
    }
    let residual = op.residual(&u, y)?;
    let alpha_bar = prior.schedule().alpha_bar(t);
    let delta = delta::evaluate(
        plan.rule.as_ref(),
        &StepContext {
            k,
            residual,
            sigma_n: op.sigma_n(),
            alpha_bar,
        },
    )?;
    let req = ProxRequest::new(&u, y, op, delta)?;
    let out = plan.solver.solve(&req).map_err(|e| e.at("prox"))?;
    if !out.x.all_finite() {
        return Err(Error::NonFinite(format!("prox output at step {k}")));
    }
    let record = StepRecord {
        k,
        t,
        alpha_bar,
        delta,
        residual,
        objective: out.objective,
        prox_iterations: out.iterations,
        prox_converged: out.converged,
        input_checksum: x.checksum(),
        output_checksum: out.x.checksum(),
    };
    Ok((out.x, z, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::make_gaussian_kernel;
    use crate::sae::{AnalyticGaussianPrior, AnalyticPriorSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior() -> AnalyticGaussianPrior {
        AnalyticPriorSpec::default().build(&[1, 8, 8]).unwrap()
    }

    #[test]
    fn default_timestep_sets() {
        assert_eq!(default_timesteps(4).unwrap(), vec![999, 749, 499, 249]);
        assert_eq!(
            default_timesteps(8).unwrap(),
            vec![999, 874, 749, 624, 499, 374, 249, 124]
        );
        assert!(default_timesteps(2).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = LatinoConfig {
            timesteps: Some(vec![10, 10]),
            ..Default::default()
        };
        assert!(cfg.resolved_timesteps().is_err());
        cfg.timesteps = Some(vec![20, 10]);
        cfg.delta_overrides = Some(vec![1.0]);
        assert!(cfg.resolved_timesteps().is_err());
        cfg.delta_overrides = Some(vec![1.0, 2.0]);
        assert_eq!(cfg.resolved_timesteps().unwrap(), vec![20, 10]);
        let custom = LatinoConfig {
            task: Task::Custom,
            ..Default::default()
        };
        let op = DegradationOp::identity(0.1).unwrap();
        assert!(Sampler::default().plan(&custom, &op, &prior()).is_err());
    }

    #[test]
    fn hard_data_consistency_limit() {
        let p = prior();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Tensor::randn(&[4], &mut rng);
        let x_true = p.sample(&c, &mut rng).unwrap();
        let op = DegradationOp::identity(1e-6).unwrap();
        let cfg = LatinoConfig {
            delta_overrides: Some(vec![1e6; 4]),
            ..Default::default()
        };
        let (x, trace) = latino_run(&x_true, &op, &p, &c, &cfg, &mut rng).unwrap();
        assert!(x.sub(&x_true).max_abs() < 1e-3);
        assert!(trace.is_complete(4));
    }

    #[test]
    fn deterministic_under_seed() {
        let p = prior();
        let op = DegradationOp::conv(make_gaussian_kernel(3, 0.8).unwrap(), 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Tensor::randn(&[4], &mut rng);
        let y = op.apply(&p.sample(&c, &mut rng).unwrap()).unwrap();
        let cfg = LatinoConfig {
            steps: 8,
            ..Default::default()
        };
        let a = latino_run(&y, &op, &p, &c, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = latino_run(&y, &op, &p, &c, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.0.checksum(), b.0.checksum());
        assert_eq!(a.1, b.1);
        assert!(a.1.is_complete(8));
        assert_eq!(
            a.1.steps.iter().map(|s| s.t).collect::<Vec<_>>(),
            default_timesteps(8).unwrap()
        );
    }

    #[test]
    fn trace_links_steps() {
        let p = prior();
        let op = DegradationOp::identity(0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Tensor::zeros(&[4]);
        let y = p.sample(&c, &mut rng).unwrap();
        let plan = Sampler::default()
            .plan(&LatinoConfig::default(), &op, &p)
            .unwrap();
        let x0 = warm_start(&y, &op).unwrap();
        let out = run_chain(&y, &op, &p, &c, &plan, x0.clone(), &mut rng).unwrap();
        assert_eq!(out.trace.start_checksum, x0.checksum());
        assert_eq!(out.trace.steps[0].input_checksum, x0.checksum());
        for w in out.trace.steps.windows(2) {
            assert_eq!(w[0].output_checksum, w[1].input_checksum);
        }
        assert_eq!(out.trace.steps[3].output_checksum, out.x.checksum());
        assert_eq!(out.latents.len(), 4);
    }

    #[test]
    fn mean_residual_nonincreasing_on_noiseless_identity() {
        let p = prior();
        let op = DegradationOp::identity(1e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Tensor::randn(&[4], &mut rng);
        let y = p.sample(&c, &mut rng).unwrap();
        let cfg = LatinoConfig {
            delta_overrides: Some(vec![1.0; 4]),
            ..Default::default()
        };
        let plan = Sampler::default().plan(&cfg, &op, &p).unwrap();
        let chains = 2000;
        let mut mean_res = [0.0; 4];
        for _ in 0..chains {
            let out = run_chain(&y, &op, &p, &c, &plan, y.clone(), &mut rng).unwrap();
            for (m, s) in mean_res.iter_mut().zip(&out.trace.steps) {
                // with A = I the prox output residual is σ²/(δ+σ²) times the decoded one
                *m += s.residual / chains as f64;
            }
        }
        for w in mean_res.windows(2) {
            assert!(w[1] <= w[0], "{mean_res:?}");
        }
    }
}
