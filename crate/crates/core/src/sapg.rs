//! Maximum-marginal-likelihood calibration of the conditioning vector.
//!
//! Each outer iteration runs a short sampler pass from the carried state,
//! estimates `∇_c log p(z_{t_1}, ..., z_{t_{N-1}} | c)` from the latents it
//! visited, and takes a projected ascent step on `c`. A final longer pass
//! with the calibrated `c` produces the returned sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::DegradationOp;
use crate::sae::{encode_stochastic, grad_logcond_c_with, log_transition, GradFallback, Prior};
use crate::sampler::{run_chain, warm_start, ChainTrace, LatinoConfig, Sampler};
use crate::tensor::Tensor;

/// `γ_m = base · decay^{max(0, m − hold)}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaRule {
    pub base: f64,
    pub decay: f64,
    pub hold: usize,
}

impl Default for GammaRule {
    fn default() -> Self {
        Self {
            base: 0.1,
            decay: 0.9,
            hold: 10,
        }
    }
}

impl GammaRule {
    pub fn gamma(&self, m: usize) -> Result<f64> {
        if m == 0 {
            return Err(Error::invalid("outer iterations are 1-based"));
        }
        Ok(self.base * self.decay.powi(m.saturating_sub(self.hold) as i32))
    }
}

/// Default step size `0.1 · 0.9^{max(0, m − 10)}`.
pub fn gamma_schedule(m: usize) -> Result<f64> {
    GammaRule::default().gamma(m)
}

/// Euclidean projection onto the ball of radius `r` around `c0`.
pub fn project_ball(c: &Tensor, c0: &Tensor, r: f64) -> Result<Tensor> {
    if !(r > 0.0) {
        return Err(Error::invalid(format!("ball radius must be positive, got {r}")));
    }
    c.same_shape(c0)?;
    let d = c.sub(c0);
    let n = d.norm();
    if n <= r {
        return Ok(c.clone());
    }
    let mut out = c0.clone();
    out.axpy(r / n, &d);
    Ok(out)
}

/// `Σ_i ∇_c log p(z_{i+1} | z_i, c)` over consecutive pairs of `latents`.
pub fn chain_grad(
    latents: &[(Tensor, u32)],
    c: &Tensor,
    prior: &dyn Prior,
    fallback: GradFallback,
) -> Result<Tensor> {
    let mut g = Tensor::zeros(c.shape());
    for pair in latents.windows(2) {
        let (z_prev, t_prev) = &pair[0];
        let (z_next, t_next) = &pair[1];
        g.axpy(
            1.0,
            &grad_logcond_c_with(z_next, z_prev, *t_prev, *t_next, c, prior, fallback)?,
        );
    }
    Ok(g)
}

/// `Σ_i log p(z_{i+1} | z_i, c)` up to a constant, the function whose
/// gradient [`chain_grad`] returns.
pub fn chain_log_density(latents: &[(Tensor, u32)], c: &Tensor, prior: &dyn Prior) -> Result<f64> {
    let mut s = 0.0;
    for pair in latents.windows(2) {
        s += log_transition(&pair[1].0, &pair[0].0, pair[0].1, pair[1].1, c, prior)?;
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SapgConfig {
    /// Number of outer iterations `M`.
    pub iterations: usize,
    /// Sampler pass inside each outer iteration.
    pub inner: LatinoConfig,
    /// Sampler pass run once with the calibrated vector.
    pub final_pass: LatinoConfig,
    pub radius: f64,
    pub gamma: GammaRule,
    pub grad_fallback: GradFallback,
}

impl Default for SapgConfig {
    fn default() -> Self {
        Self {
            iterations: 15,
            inner: LatinoConfig {
                steps: 4,
                ..Default::default()
            },
            final_pass: LatinoConfig {
                steps: 8,
                ..Default::default()
            },
            radius: 15.0,
            gamma: GammaRule::default(),
            grad_fallback: GradFallback::FiniteDifference,
        }
    }
}

impl SapgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("SAPG needs at least one outer iteration".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config("SAPG ball radius must be positive".into()));
        }
        self.inner.resolved_timesteps()?;
        self.final_pass.resolved_timesteps()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub c: Tensor,
    pub c0: Tensor,
    pub radius: f64,
    /// `c_m` after each outer iteration, starting with `c_0`.
    pub history: Vec<Tensor>,
    /// Chain gradient estimate of each outer iteration.
    pub grads: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct SapgOutput {
    pub x: Tensor,
    pub state: PromptState,
    /// One trace per outer iteration.
    pub traces: Vec<ChainTrace>,
    pub final_trace: ChainTrace,
}

/// Run the calibration loop and a final pass with the calibrated vector.
pub fn latino_pro_run<R: Rng + ?Sized>(
    y: &Tensor,
    op: &DegradationOp,
    prior: &dyn Prior,
    c0: &Tensor,
    cfg: &SapgConfig,
    rng: &mut R,
) -> Result<SapgOutput> {
    sapg_with(&Sampler::default(), y, op, prior, c0, cfg, rng)
}

pub fn sapg_with<R: Rng + ?Sized>(
    sampler: &Sampler,
    y: &Tensor,
    op: &DegradationOp,
    prior: &dyn Prior,
    c0: &Tensor,
    cfg: &SapgConfig,
    rng: &mut R,
) -> Result<SapgOutput> {
    cfg.validate()?;
    if c0.len() != prior.cond_dim() {
        return Err(Error::shape(format!(
            "initial conditioning vector has {} entries, prior expects {}",
            c0.len(),
            prior.cond_dim()
        )));
    }
    let inner = sampler.plan(&cfg.inner, op, prior)?;
    let final_plan = sampler.plan(&cfg.final_pass, op, prior)?;
    let mut x = warm_start(y, op)?;
    let t_anchor = *inner.timesteps.last().expect("non-empty timesteps");
    let mut anchor = (
        encode_stochastic(&x, t_anchor, prior, rng).map_err(|e| e.at("anchor"))?,
        t_anchor,
    );
    let mut state = PromptState {
        c: c0.clone(),
        c0: c0.clone(),
        radius: cfg.radius,
        history: vec![c0.clone()],
        grads: Vec::with_capacity(cfg.iterations),
    };
    let mut traces = Vec::with_capacity(cfg.iterations);
    for m in 1..=cfg.iterations {
        let out = run_chain(y, op, prior, &state.c, &inner, x, rng)?;
        let mut latents = Vec::with_capacity(out.latents.len());
        latents.push(anchor);
        latents.extend(out.latents[..out.latents.len() - 1].iter().cloned());
        let g = chain_grad(&latents, &state.c, prior, cfg.grad_fallback)
            .map_err(|e| e.at("chain gradient"))?;
        let gamma = cfg.gamma.gamma(m)?;
        let mut next = state.c.clone();
        next.axpy(gamma, &g);
        state.c = project_ball(&next, c0, cfg.radius)?;
        if !state.c.all_finite() {
            return Err(Error::NonFinite(format!("conditioning vector at iteration {m}")));
        }
        state.history.push(state.c.clone());
        state.grads.push(g);
        anchor = out.latents.last().expect("non-empty chain").clone();
        x = out.x;
        traces.push(out.trace);
    }
    let fin = run_chain(y, op, prior, &state.c, &final_plan, x, rng)?;
    Ok(SapgOutput {
        x: fin.x,
        state,
        traces,
        final_trace: fin.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::{AnalyticGaussianPrior, AnalyticPriorSpec, FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior(cond_scale: f64) -> AnalyticGaussianPrior {
        AnalyticPriorSpec {
            cond_scale,
            ..Default::default()
        }
        .build(&[1, 8, 8])
        .unwrap()
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_schedule(5).unwrap(), 0.1);
        assert_eq!(gamma_schedule(10).unwrap(), 0.1);
        assert!((gamma_schedule(12).unwrap() - 0.081).abs() < 1e-15);
        assert!(gamma_schedule(0).is_err());
    }

    #[test]
    fn projection() {
        let c0 = Tensor::zeros(&[3]);
        let inside = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(project_ball(&inside, &c0, 15.0).unwrap(), inside);
        assert_eq!(project_ball(&c0, &c0, 15.0).unwrap(), c0);
        let far = Tensor::from_vec(vec![0.0, 18.0, 24.0]);
        let p = project_ball(&far, &c0, 15.0).unwrap();
        assert!((p.norm() - 15.0).abs() < 1e-12);
        let cos = p.dot(&far) / (p.norm() * far.norm());
        assert!((cos - 1.0).abs() < 1e-7);
        assert!(project_ball(&far, &c0, 0.0).is_err());
    }

    #[test]
    fn chain_grad_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let latents: Vec<(Tensor, u32)> = [249u32, 999, 749, 499]
            .iter()
            .map(|&t| (Tensor::randn(&[64], &mut rng), t))
            .collect();
        let c = Tensor::randn(&[4], &mut rng);
        let g = chain_grad(&latents, &c, &prior(0.0), GradFallback::Disabled).unwrap();
        assert_eq!(g.max_abs(), 0.0);

        let p = prior(1.0);
        let z_prev = Tensor::randn(&[64], &mut rng);
        let sab = p.schedule().alpha_bar(749).sqrt();
        let z_next = p.consistency_map(&z_prev, 999, &c).unwrap().scale(sab);
        let g = chain_grad(&[(z_prev, 999), (z_next, 749)], &c, &p, GradFallback::Disabled).unwrap();
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn chain_grad_matches_finite_differences() {
        let p = prior(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let latents: Vec<(Tensor, u32)> = [249u32, 999, 749, 499]
                .iter()
                .map(|&t| (Tensor::randn(&[64], &mut rng), t))
                .collect();
            let c = Tensor::randn(&[4], &mut rng);
            let g = chain_grad(&latents, &c, &p, GradFallback::Disabled).unwrap();
            let fd = Tensor::from_fn(&[4], |j| {
                let mut cp = c.clone();
                cp.data_mut()[j] += FD_STEP;
                let up = chain_log_density(&latents, &cp, &p).unwrap();
                cp.data_mut()[j] -= 2.0 * FD_STEP;
                let down = chain_log_density(&latents, &cp, &p).unwrap();
                (up - down) / (2.0 * FD_STEP)
            });
            assert!(g.sub(&fd).norm() <= 1e-5 * fd.norm());
            assert!(g.dot(&fd) >= 0.0);
        }
    }

    fn small_cfg(iterations: usize) -> SapgConfig {
        let inner = LatinoConfig {
            steps: 4,
            delta_rule: Some("noise_level".into()),
            ..Default::default()
        };
        SapgConfig {
            iterations,
            final_pass: LatinoConfig {
                steps: 8,
                ..inner.clone()
            },
            inner,
            ..Default::default()
        }
    }

    #[test]
    fn carry_forward_and_feasibility() {
        let p = prior(1.0);
        let op = DegradationOp::identity(0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c_star = Tensor::randn(&[4], &mut rng).scale(3.0);
        let y = op.apply(&p.sample(&c_star, &mut rng).unwrap()).unwrap();
        let c0 = Tensor::zeros(&[4]);
        let cfg = SapgConfig {
            radius: 0.5,
            ..small_cfg(6)
        };
        let out = latino_pro_run(&y, &op, &p, &c0, &cfg, &mut rng).unwrap();
        assert_eq!(out.traces.len(), 6);
        assert_eq!(out.state.history.len(), 7);
        for c in &out.state.history {
            assert!(c.sub(&c0).norm() <= 0.5 + 1e-6);
        }
        assert_eq!(out.traces[0].start_checksum, warm_start(&y, &op).unwrap().checksum());
        for w in out.traces.windows(2) {
            assert_eq!(
                w[1].start_checksum,
                w[0].final_x.as_ref().unwrap().checksum()
            );
        }
        assert_eq!(
            out.final_trace.start_checksum,
            out.traces[5].final_x.as_ref().unwrap().checksum()
        );
        assert_eq!(out.final_trace.steps.len(), 8);
    }

    #[test]
    fn frozen_prompt_cases() {
        let op = DegradationOp::identity(0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c0 = Tensor::randn(&[4], &mut rng);
        let p0 = prior(0.0);
        let y = p0.sample(&c0, &mut rng).unwrap();
        let out = latino_pro_run(&y, &op, &p0, &c0, &small_cfg(3), &mut rng).unwrap();
        assert!(out.state.history.iter().all(|c| *c == c0));

        let p = prior(1.0);
        let cfg = SapgConfig {
            gamma: GammaRule {
                base: 0.0,
                ..Default::default()
            },
            ..small_cfg(3)
        };
        let out = latino_pro_run(&y, &op, &p, &c0, &cfg, &mut rng).unwrap();
        assert!(out.state.history.iter().all(|c| *c == c0));
    }

    #[test]
    fn zero_dependence_matches_plain_sampler_draws() {
        // with W = 0 the loop consumes exactly the same random numbers as
        // the inner passes and final pass run back to back
        let p0 = prior(0.0);
        let op = DegradationOp::identity(0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c0 = Tensor::randn(&[4], &mut rng);
        let y = p0.sample(&c0, &mut rng).unwrap();
        let cfg = small_cfg(2);
        let out = latino_pro_run(&y, &op, &p0, &c0, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();

        let sampler = Sampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inner = sampler.plan(&cfg.inner, &op, &p0).unwrap();
        let fin = sampler.plan(&cfg.final_pass, &op, &p0).unwrap();
        let mut x = warm_start(&y, &op).unwrap();
        let _anchor = encode_stochastic(&x, 249, &p0, &mut rng).unwrap();
        for _ in 0..2 {
            x = run_chain(&y, &op, &p0, &c0, &inner, x, &mut rng).unwrap().x;
        }
        let x = run_chain(&y, &op, &p0, &c0, &fin, x, &mut rng).unwrap().x;
        assert_eq!(x, out.x);
    }
}
