//! Self-checks runnable from the command line (`pnp verify`).
//!
//! Each [`Suite`] runs a small, seeded set of numerical checks and reports
//! one [`Check`] per property. Suites are looked up by name in a
//! [`SuiteRegistry`].

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::experiments::{
    conjugate_moments, conjugate_problem, conjugate_sampler_config, median, recovery_run, sampler_stability,
    ula_contrast, ConjugateOperator,
};
use super::runner::run_experiment;
use crate::equiv_hr::{compose_check, lift_kernel, verify_equivalence, LiftMethod, SubsampleKind, SubsampleOp};
use crate::error::{Error, Result};
use crate::operators::{
    make_gaussian_kernel, make_motion_kernel, Compose, Conv, DegradationOp, Downsample, ForwardOperator, Mask,
    ResampleMode,
};
use crate::proximal::{prox_cg, prox_freq, ProxRequest};
use crate::sae::{
    consistency_apply, spawn_echo_server, AnalyticPriorSpec, GradFallback, HelloInfo, Prior, RemotePrior,
};
use crate::sampler::{delta_schedule, variance_matched_delta, Task};
use crate::sapg::{chain_grad, chain_log_density};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= limit,
            detail: format!("{value:.3e} (limit {limit:.0e})"),
        }
    }

    fn holds(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{mark} {}: {}", self.name, self.detail)
    }
}

pub trait Suite: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    fn run(&self, seed: u64) -> Result<Vec<Check>>;
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub struct SuiteRegistry {
    suites: Vec<Arc<dyn Suite>>,
}

impl fmt::Debug for SuiteRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl Default for SuiteRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(AdjointSuite));
        r.register(Arc::new(PseudoinverseSuite));
        r.register(Arc::new(ProxSuite));
        r.register(Arc::new(DeltaSuite));
        r.register(Arc::new(EquivalenceSuite));
        r.register(Arc::new(ConjugateSuite));
        r.register(Arc::new(StabilitySuite));
        r.register(Arc::new(SapgSuite));
        r.register(Arc::new(ProtocolSuite));
        r.register(Arc::new(DemoSuite));
        r
    }
}

impl SuiteRegistry {
    pub fn empty() -> Self {
        Self { suites: Vec::new() }
    }

    /// Replaces a suite with the same name.
    pub fn register(&mut self, suite: Arc<dyn Suite>) {
        self.suites.retain(|s| s.name() != suite.name());
        self.suites.push(suite);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.suites.iter().map(|s| s.name()).collect()
    }

    pub fn suites(&self) -> &[Arc<dyn Suite>] {
        &self.suites
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Suite>> {
        self.suites
            .iter()
            .find(|s| s.name() == name)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("unknown suite {name:?}; known: {}", self.names().join(", "))))
    }

    /// Runs the named suites, or all of them when `names` is empty. A suite
    /// that errors is reported as a single failed check.
    pub fn run(&self, names: &[String], seed: u64) -> Result<Vec<SuiteReport>> {
        let selected: Vec<Arc<dyn Suite>> = if names.is_empty() {
            self.suites.clone()
        } else {
            names.iter().map(|n| self.get(n)).collect::<Result<_>>()?
        };
        Ok(selected
            .into_iter()
            .map(|s| {
                let start = Instant::now();
                let checks = s
                    .run(seed)
                    .unwrap_or_else(|e| vec![Check::holds(s.name(), false, format!("error: {e}"))]);
                SuiteReport {
                    suite: s.name(),
                    checks,
                    seconds: start.elapsed().as_secs_f64(),
                }
            })
            .collect())
    }
}

fn linear_ops(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, Arc<dyn ForwardOperator>)>> {
    let mask = Tensor::rand_unit(&[16, 16], rng).map(|v| if v < 0.6 { 1.0 } else { 0.0 });
    Ok(vec![
        ("conv gaussian", Arc::new(Conv::new(make_gaussian_kernel(7, 1.5)?))),
        ("conv motion", Arc::new(Conv::new(make_motion_kernel(rng.random(), 9, 0.5)?))),
        ("avgpool x2", Arc::new(Downsample::new(2, ResampleMode::Avgpool)?)),
        ("bicubic x4", Arc::new(Downsample::new(4, ResampleMode::Bicubic)?)),
        ("shannon x2", Arc::new(Downsample::new(2, ResampleMode::Shannon)?)),
        ("mask", Arc::new(Mask::new(mask)?)),
        (
            "compose",
            Arc::new(Compose::new(vec![
                Arc::new(Conv::new(make_gaussian_kernel(3, 0.8)?)) as Arc<dyn ForwardOperator>,
                Arc::new(Downsample::new(2, ResampleMode::Bicubic)?),
            ])?),
        ),
    ])
}

struct AdjointSuite;

impl Suite for AdjointSuite {
    fn name(&self) -> &'static str {
        "adjoint"
    }

    fn description(&self) -> &'static str {
        "<Ax, y> = <x, A^T y> for every linear operator kind"
    }

    fn run(&self, seed: u64) -> Result<Vec<Check>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checks = Vec::new();
        for (name, op) in linear_ops(&mut rng)? {
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let x = Tensor::randn(&[1, 16, 16], &mut rng);
                let y = Tensor::randn(&op.output_shape(x.shape())?, &mut rng);
                let gap = (op.apply(&x)?.dot(&y) - x.dot(&op.adjoint(&y)?)).abs();
                worst = worst.max(gap / (x.norm() * y.norm()));
            }
            checks.push(Check::at_most(name, worst, 1e-5));
        }
        Ok(checks)
    }
}

struct PseudoinverseSuite;

impl Suite for PseudoinverseSuite {
    fn name(&self) -> &'static str {
        "pseudoinverse"
    }

    fn description(&self) -> &'static str {
        "A A^+ A = A for invertible convolution, average pooling and masks"
    }

    fn run(&self, seed: u64) -> Result<Vec<Check>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = Tensor::rand_unit(&[16, 16], &mut rng).map(|v| if v < 0.5 { 1.0 } else { 0.0 });
        let ops: Vec<(&str, Arc<dyn ForwardOperator>)> = vec![
            ("conv", Arc::new(Conv::new(make_gaussian_kernel(3, 0.6)?))),
            ("avgpool x2", Arc::new(Downsample::new(2, ResampleMode::Avgpool)?)),
            ("avgpool x4", Arc::new(Downsample::new(4, ResampleMode::Avgpool)?)),
            ("mask", Arc::new(Mask::new(mask)?)),
        ];
        let mut checks = Vec::new();
        for (name, op) in ops {
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let ax = op.apply(&Tensor::randn(&[1, 16, 16], &mut rng))?;
                let back = op.apply(&op.pseudoinverse(&ax)?)?;
                worst = worst.max(back.sub(&ax).norm() / ax.norm());
            }
            checks.push(Check::at_most(name, worst, 1e-4));
        }
        Ok(checks)
    }
}

struct ProxSuite;

impl Suite for ProxSuite {
    fn name(&self) -> &'static str {
        "prox"
    }

    fn description(&self) -> &'static str {
        "closed-form frequency prox against conjugate gradients"
    }

    fn run(&self, seed: u64) -> Result<Vec<Check>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst, mut worst_normal): (f64, f64) = (0.0, 0.0);
        for i in 0..50 {
            let n = if i % 2 == 0 { 16 } else { 32 };
            let kernel = if rng.random::<bool>() {
                make_gaussian_kernel(2 * rng.random_range(1..5usize) + 1, rng.random_range(0.4..3.0))?
            } else {
                make_motion_kernel(rng.random(), 2 * rng.random_range(1..5usize) + 1, 0.5)?
            };
            let op = DegradationOp::conv(kernel, rng.random_range(0.01..0.2))?;
            let u = Tensor::rand_unit(&[1, n, n], &mut rng);
            let y = Tensor::rand_unit(&[1, n, n], &mut rng);
            let req = ProxRequest::new(&u, &y, &op, 10f64.powf(rng.random_range(-4.0..1.0)))?;
            let fast = prox_freq(&req)?;
            let cg = prox_cg(&req, 1e-13, 5000)?;
            worst = worst.max(fast.sub(&cg.x).norm() / cg.x.norm());
            worst_normal = worst_normal.max(req.normal_residual(&fast)?);
        }
        Ok(vec![
            Check::at_most("freq vs cg, 50 instances", worst, 1e-6),
            Check::at_most("normal equations residual", worst_normal, 1e-5),
        ])
    }
}

struct DeltaSuite;

impl Suite for DeltaSuite {
    fn name(&self) -> &'static str {
        "delta"
    }

    fn description(&self) -> &'static str {
        "per-task step-size schedules reproduce their formulas bit for bit"
    }

    fn run(&self, seed: u64) -> Result<Vec<Check>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mismatches = 0;
        let mut probes = 0;
        for _ in 0..500 {
            let k = rng.random_range(1..9usize);
            let r: f64 = rng.random_range(0.0..10.0);
            let s: f64 = rng.random_range(1e-3..0.5);
            let ab: f64 = rng.random_range(0.0..1.0);
            let pick = |switch: usize, early: f64, late: f64| if k >= switch { late } else { early };
            let expected = [
                (Task::GaussDeblur, pick(5, 4e-5, 2e-5) * (1.0 - ab) * r / s),
                (Task::MotionDeblur, pick(5, 2e-6, 4e-6) * (1.0 - ab) * r / s),
                (Task::Sr8, pick(6, 3e-3, 6e-3) * (1.0 - ab) * r / s),
                (Task::Sr16, pick(6, 9e-3, 2e-2) * (1.0 - ab) * r / s),
                (Task::Inpaint, pick(5, 0.5, 1.0) * (1.0 - ab)),
            ];
            for (task, want) in expected {
                probes += 1;
                if delta_schedule(task, k, r, s, ab)?.to_bits() != want.to_bits() {
                    mismatches += 1;
                }
            }
        }
        let tau: f64 = 0.3;
        let sigma: f64 = 0.05;
        let vm = variance_matched_delta(tau, sigma);
        let vm_want = sigma * sigma * ((1.0 + tau / (sigma * sigma)).sqrt() - 1.0);
        Ok(vec![
            Check::holds(
                "task schedules",
                mismatches == 0,
                format!("{mismatches} mismatches over {probes} probes"),
            ),
            Check::holds("variance matched", vm.to_bits() == vm_want.to_bits(), format!("{vm:e}")),
        ])
    }
}

struct EquivalenceSuite;

impl Suite for EquivalenceSuite {
    fn name(&self) -> &'static str {
        "equivalence"
    }

    fn description(&self) -> &'static str {
        "low-resolution kernels lifted to equivalent high-resolution kernels"
    }

    fn run(&self, seed: u64) -> Result<Vec<Check>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shannon = SubsampleOp::shannon(2)?;
        let bicubic = SubsampleOp::new(2, SubsampleKind::Bicubic)?;
        let (mut worst_s, mut worst_b): (f64, f64) = (0.0, 0.0);
        for _ in 0..20 {
            let x = Tensor::rand_unit(&[1, 64, 64], &mut rng);
            let sigma: f64 = rng.random_range(1.5..3.0);
            let h = make_gaussian_kernel(2 * (3.0 * sigma).ceil() as usize + 1, sigma)?;
            let lifted = lift_kernel(&h, 2, LiftMethod::ShannonZeroPad { grid: (32, 32) })?;
            worst_s = worst_s.max(verify_equivalence(&x, &h, &lifted, &shannon)?);
            let lifted = lift_kernel(&h, 2, LiftMethod::BicubicUpsample)?;
            worst_b = worst_b.max(verify_equivalence(&x, &h, &lifted, &bicubic)?);
        }
        let x = Tensor::rand_unit(&[1, 128, 128], &mut rng);
        Ok(vec![
            Check::at_most("shannon lift", worst_s, 1e-5),
            Check::at_most("bicubic lift", worst_b, 1e-2),
            Check::at_most("avgpool compose (8,2)", compose_check(&x, 8, 2, SubsampleKind::Avgpool)?, 0.0),
            Check::at_most("bicubic compose (8,2)", compose_check(&x, 8, 2, SubsampleKind::Bicubic)?, 1e-2),
        ])
    }
}

struct ConjugateSuite;

impl Suite for ConjugateSuite {
    fn name(&self) -> &'static str {
        "conjugate"
    }

    fn description(&self) -> &'static str {
        "sampler moments against the closed-form Gaussian posterior"
    }

    fn run(&self, seed: u64) -> Result<Vec<Check>> {
        let mut checks = Vec::new();
        for which in [ConjugateOperator::Identity, ConjugateOperator::Blur] {
            let problem = conjugate_problem(which, 1)?;
            let r = conjugate_moments(&problem, &conjugate_sampler_config(), 2000, seed)?;
            checks.push(Check::at_most(format!("{} mean", which.name()), r.mean_rel_err, 0.02));
            checks.push(Check::at_most(format!("{} variance", which.name()), r.var_rel_err, 0.10));
        }
        Ok(checks)
    }
}

struct StabilitySuite;

impl Suite for StabilitySuite {
    fn name(&self) -> &'static str {
        "stability"
    }

    fn description(&self) -> &'static str {
        "implicit steps stay bounded for any step size, explicit Langevin does not"
    }

    fn run(&self, seed: u64) -> Result<Vec<Check>> {
        let mut checks = Vec::new();
        for which in [ConjugateOperator::Identity, ConjugateOperator::Blur] {
            let problem = conjugate_problem(which, 1)?;
            let runs = sampler_stability(&problem, &[1e-2, 1.0, 1e2, 1e6], seed)?;
            let worst = runs.iter().map(|r| r.max_ratio).fold(0.0, f64::max);
            checks.push(Check::holds(
                format!("{} implicit bounded", which.name()),
                runs.iter().all(|r| r.bounded),
                format!("max |x| / scale {worst:.3}"),
            ));
            let below = ula_contrast(&problem, 1.9, 20_000, seed)?;
            let above = ula_contrast(&problem, 2.1, 20_000, seed)?;
            checks.push(Check::holds(
                format!("{} langevin threshold", which.name()),
                !below.diverged && above.diverged,
                format!(
                    "1.9/L {}, 2.1/L {}",
                    if below.diverged { "diverged" } else { "bounded" },
                    if above.diverged { "diverged" } else { "bounded" }
                ),
            ));
        }
        Ok(checks)
    }
}

struct SapgSuite;

impl Suite for SapgSuite {
    fn name(&self) -> &'static str {
        "sapg"
    }

    fn description(&self) -> &'static str {
        "prompt gradient against finite differences and synthetic recovery"
    }

    fn run(&self, seed: u64) -> Result<Vec<Check>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let cond_dim = rng.random_range(1..6usize);
            let prior = AnalyticPriorSpec {
                cond_dim,
                cond_seed: rng.random(),
                ..AnalyticPriorSpec::default()
            }
            .build(&[1, 5, 5])?;
            let mut latents = vec![(Tensor::randn(&[25], &mut rng), 249u32)];
            for t in [999u32, 749, 499, 249] {
                latents.push((Tensor::randn(&[25], &mut rng), t));
            }
            let c = Tensor::randn(&[cond_dim], &mut rng);
            let g = chain_grad(&latents, &c, &prior, GradFallback::Disabled)?;
            let mut fd = Tensor::zeros(&[cond_dim]);
            for j in 0..cond_dim {
                let mut up = c.clone();
                up.data_mut()[j] += h;
                let mut down = c.clone();
                down.data_mut()[j] -= h;
                fd.data_mut()[j] =
                    (chain_log_density(&latents, &up, &prior)? - chain_log_density(&latents, &down, &prior)?) / (2.0 * h);
            }
            worst = worst.max(g.sub(&fd).norm() / fd.norm());
        }
        let mut ratios = Vec::new();
        let mut gains = Vec::new();
        for s in 0..10 {
            let r = recovery_run(seed.wrapping_add(s))?;
            ratios.push(r.distance_ratio);
            gains.push(r.log_lik_final - r.log_lik_c0);
        }
        Ok(vec![
            Check::at_most("gradient vs finite differences", worst, 1e-5),
            Check::holds(
                "marginal likelihood improves",
                median(&mut gains) > 0.0,
                format!("median gain {:.3}", median(&mut gains)),
            ),
            Check::at_most("recovered distance ratio (median)", median(&mut ratios), 0.2),
        ])
    }
}

struct ProtocolSuite;

impl Suite for ProtocolSuite {
    fn name(&self) -> &'static str {
        "protocol"
    }

    fn description(&self) -> &'static str {
        "remote prior client against the in-process echo server"
    }

    fn run(&self, seed: u64) -> Result<Vec<Check>> {
        let info = HelloInfo {
            latent_shape: vec![1, 8, 8],
            cond_dim: 3,
            timesteps: vec![999, 749, 499, 249],
        };
        let (addr, _handle) = spawn_echo_server(info.clone())?;
        let remote = RemotePrior::connect(&addr.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::randn(&[1, 8, 8], &mut rng).round_to_f32();
        let c = Tensor::randn(&[3], &mut rng);
        let round_trip = remote.decode(&z)? == z && remote.encode(&z)? == z;
        let out = consistency_apply(&z, 499, &c, &remote)?;
        let rejected = consistency_apply(&z, 500, &c, &remote).is_err();
        let survives = remote.consistency(&z, 249, &c).is_ok();
        Ok(vec![
            Check::holds("handshake", remote.info() == &info, format!("{:?}", remote.info())),
            Check::holds("bit-exact round trip", round_trip, "decode and encode echo f32 tensors"),
            Check::holds("consistency shape", out.shape() == [1, 8, 8], format!("{:?}", out.shape())),
            Check::holds(
                "request errors",
                rejected && survives,
                "unsupported timestep rejected, connection kept",
            ),
        ])
    }
}

struct DemoSuite;

impl Suite for DemoSuite {
    fn name(&self) -> &'static str {
        "demo"
    }

    fn description(&self) -> &'static str {
        "end-to-end deblurring with the smoothness prior"
    }

    fn run(&self, _seed: u64) -> Result<Vec<Check>> {
        let cfg = ExperimentConfig::deblur_demo();
        let start = Instant::now();
        let a = run_experiment(&cfg)?;
        let secs = start.elapsed().as_secs_f64();
        let b = run_experiment(&cfg)?;
        let before = a.metrics.psnr_degraded.unwrap_or(f64::NAN);
        let after = a.metrics.psnr_restored.unwrap_or(f64::NAN);
        Ok(vec![
            Check::holds(
                "psnr gain",
                after - before >= 2.0,
                format!("{before:.2} dB -> {after:.2} dB"),
            ),
            Check::holds("deterministic", a.without_timing() == b.without_timing(), "two runs compared"),
            Check::at_most("runtime (s)", secs, 10.0),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_and_resolves() {
        let r = SuiteRegistry::default();
        assert_eq!(
            r.names(),
            [
                "adjoint",
                "pseudoinverse",
                "prox",
                "delta",
                "equivalence",
                "conjugate",
                "stability",
                "sapg",
                "protocol",
                "demo"
            ]
        );
        assert!(r.get("nope").is_err());
        assert!(r.run(&["nope".into()], 0).is_err());
    }

    #[test]
    fn quick_suites_pass() {
        let r = SuiteRegistry::default();
        let names: Vec<String> = ["adjoint", "delta", "protocol"].iter().map(|s| s.to_string()).collect();
        for report in r.run(&names, 3).unwrap() {
            assert!(report.passed(), "{}: {:?}", report.suite, report.checks);
        }
    }

    struct Broken;

    impl Suite for Broken {
        fn name(&self) -> &'static str {
            "broken"
        }
        fn description(&self) -> &'static str {
            "always errors"
        }
        fn run(&self, _seed: u64) -> Result<Vec<Check>> {
            Err(Error::invalid("boom"))
        }
    }

    #[test]
    fn errors_become_failed_checks() {
        let mut r = SuiteRegistry::empty();
        r.register(Arc::new(Broken));
        let reports = r.run(&[], 0).unwrap();
        assert!(!reports[0].passed());
        assert!(reports[0].checks[0].detail.contains("boom"));
    }
}
