//! Small self-checking experiments with closed-form ground truth.
//!
//! Each experiment builds its problem from seeds, runs the relevant
//! algorithm, and reports the quantities compared against the analytic
//! answer. The `verify` suites and the acceptance tests share them.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{make_gaussian_kernel, DegradationOp};
use crate::sae::{AnalyticGaussianPrior, AnalyticPriorSpec};
use crate::sampler::{
    lipschitz_constant, run_chain, ula::ula_run_from, warm_start, LatinoConfig, Sampler,
};
use crate::sapg::{latino_pro_run, SapgConfig};
use crate::tensor::Tensor;

/// Seed of the conditioning map shared by the synthetic experiments.
pub const COND_SEED: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConjugateOperator {
    Identity,
    /// 3x3 Gaussian blur with σ = 0.4.
    Blur,
}

impl ConjugateOperator {
    pub fn name(self) -> &'static str {
        match self {
            ConjugateOperator::Identity => "identity",
            ConjugateOperator::Blur => "blur",
        }
    }

    pub fn build(self, sigma_n: f64) -> Result<DegradationOp> {
        match self {
            ConjugateOperator::Identity => DegradationOp::identity(sigma_n),
            ConjugateOperator::Blur => DegradationOp::conv(make_gaussian_kernel(3, 0.4)?, sigma_n),
        }
    }
}

/// Linear-Gaussian inverse problem on an 8x8 image with a 64-dimensional
/// DCT latent, whose posterior is known exactly.
#[derive(Clone, Debug)]
pub struct ConjugateProblem {
    pub which: ConjugateOperator,
    pub prior: AnalyticGaussianPrior,
    pub op: DegradationOp,
    pub c: Tensor,
    pub x_true: Tensor,
    pub y: Tensor,
}

pub const CONJUGATE_SIGMA: f64 = 0.05;

pub fn conjugate_prior_spec() -> AnalyticPriorSpec {
    AnalyticPriorSpec {
        latent_dim: None,
        cond_dim: 4,
        amplitude: 0.2,
        corner: 4.0,
        exponent: 1.0,
        offset: 0.5,
        cond_scale: 1.0,
        cond_seed: COND_SEED,
    }
}

pub fn conjugate_problem(which: ConjugateOperator, seed: u64) -> Result<ConjugateProblem> {
    let prior = conjugate_prior_spec().build(&[1, 8, 8])?;
    let op = which.build(CONJUGATE_SIGMA)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Tensor::randn(&[4], &mut rng).scale(0.15);
    let x_true = prior.sample(&c, &mut rng)?;
    let mut y = op.apply(&x_true)?;
    y.axpy(CONJUGATE_SIGMA, &Tensor::randn(y.shape(), &mut rng));
    Ok(ConjugateProblem {
        which,
        prior,
        op,
        c,
        x_true,
        y,
    })
}

/// Eight small timesteps with variance-matched proximal steps.
pub fn conjugate_sampler_config() -> LatinoConfig {
    LatinoConfig {
        steps: 8,
        timesteps: Some((10..=17).rev().collect()),
        delta_rule: Some("variance_matched".into()),
        clamp: false,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub operator: String,
    pub chains: usize,
    /// `‖mean_emp − mean‖ / ‖mean‖`
    pub mean_rel_err: f64,
    /// `‖var_emp − var‖ / ‖var‖` over the marginal variances.
    pub var_rel_err: f64,
    /// Largest per-pixel relative variance error.
    pub var_max_rel_err: f64,
    pub seconds: f64,
}

/// Run `chains` independent chains and compare their moments with the
/// closed-form posterior.
pub fn conjugate_moments(
    problem: &ConjugateProblem,
    cfg: &LatinoConfig,
    chains: usize,
    seed: u64,
) -> Result<MomentReport> {
    if chains < 2 {
        return Err(Error::invalid("need at least two chains for variances"));
    }
    let start = Instant::now();
    let sampler = Sampler::default();
    let plan = sampler.plan(cfg, &problem.op, &problem.prior)?;
    let x0 = warm_start(&problem.y, &problem.op)?;
    let n = x0.len();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for i in 0..chains {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let out = run_chain(
            &problem.y,
            &problem.op,
            &problem.prior,
            &problem.c,
            &plan,
            x0.clone(),
            &mut rng,
        )?;
        for (j, v) in out.x.data().iter().enumerate() {
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    let post = problem.prior.posterior(&problem.op, &problem.y, &problem.c)?;
    let nf = chains as f64;
    let mean = Tensor::new(post.mean.shape().to_vec(), sum.iter().map(|s| s / nf).collect())?;
    let var = Tensor::new(
        post.mean.shape().to_vec(),
        sum.iter()
            .zip(&sum_sq)
            .map(|(s, q)| (q - s * s / nf) / (nf - 1.0))
            .collect(),
    )?;
    let true_var = post.marginal_variances();
    let var_max_rel_err = var
        .data()
        .iter()
        .zip(true_var.data())
        .map(|(a, b)| (a / b - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(MomentReport {
        operator: problem.which.name().to_string(),
        chains,
        mean_rel_err: mean.sub(&post.mean).norm() / post.mean.norm(),
        var_rel_err: var.sub(&true_var).norm() / true_var.norm(),
        var_max_rel_err,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundedRun {
    pub delta: f64,
    /// Largest iterate norm divided by the norm of the data.
    pub max_ratio: f64,
    pub bounded: bool,
}

/// Sampler chains with fixed `δ` on the conjugate problem; every iterate must
/// stay within ten times the data scale.
pub fn sampler_stability(problem: &ConjugateProblem, deltas: &[f64], seed: u64) -> Result<Vec<BoundedRun>> {
    let sampler = Sampler::default();
    let scale = problem.y.norm().max(problem.x_true.norm());
    deltas
        .iter()
        .map(|&delta| {
            let cfg = LatinoConfig {
                steps: 8,
                delta_overrides: Some(vec![delta; 8]),
                ..Default::default()
            };
            let plan = sampler.plan(&cfg, &problem.op, &problem.prior)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = warm_start(&problem.y, &problem.op)?;
            let mut max_ratio: f64 = x.norm() / scale;
            // repeated passes exercise many more steps than one chain
            for _ in 0..25 {
                let out = run_chain(&problem.y, &problem.op, &problem.prior, &problem.c, &plan, x, &mut rng)?;
                for s in &out.trace.steps {
                    if !s.objective.is_finite() {
                        max_ratio = f64::INFINITY;
                    }
                }
                x = out.x;
                max_ratio = max_ratio.max(x.norm() / scale);
            }
            Ok(BoundedRun {
                delta,
                max_ratio,
                bounded: max_ratio <= 10.0,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UlaReport {
    pub lipschitz: f64,
    pub step: f64,
    pub diverged: bool,
    /// `‖mean_emp − mean‖ / ‖mean‖` when the chain stayed bounded.
    pub mean_rel_err: Option<f64>,
}

/// Explicit Langevin on the conjugate problem with step `factor / L`.
pub fn ula_contrast(problem: &ConjugateProblem, factor: f64, n_iter: usize, seed: u64) -> Result<UlaReport> {
    let l = lipschitz_constant(&problem.op, &problem.prior)?;
    let step = factor / l;
    let post = problem.prior.posterior(&problem.op, &problem.y, &problem.c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let score = |x: &Tensor| problem.prior.score(x, &problem.c);
    let x0 = warm_start(&problem.y, &problem.op)?;
    let out = ula_run_from(&problem.y, &problem.op, score, step, n_iter, x0, n_iter / 10, &mut rng)?;
    Ok(UlaReport {
        lipschitz: l,
        step,
        diverged: out.diverged,
        mean_rel_err: out
            .mean
            .map(|m| m.sub(&post.mean).norm() / post.mean.norm()),
    })
}

/// Synthetic calibration problem: data generated under a known `c*` with
/// `‖c*‖ = 5`, identity operator, calibration started at `c0 = 0`.
#[derive(Clone, Debug)]
pub struct RecoveryProblem {
    pub prior: AnalyticGaussianPrior,
    pub op: DegradationOp,
    pub c_star: Tensor,
    pub c0: Tensor,
    pub y: Tensor,
}

pub fn recovery_problem(seed: u64) -> Result<RecoveryProblem> {
    let prior = conjugate_prior_spec().build(&[1, 8, 8])?;
    let op = DegradationOp::identity(CONJUGATE_SIGMA)?;
    let mut crng = ChaCha8Rng::seed_from_u64(2000);
    let c = Tensor::randn(&[4], &mut crng);
    let c_star = c.scale(5.0 / c.norm());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = prior.sample(&c_star, &mut rng)?;
    let mut y = op.apply(&x)?;
    y.axpy(CONJUGATE_SIGMA, &Tensor::randn(y.shape(), &mut rng));
    Ok(RecoveryProblem {
        prior,
        op,
        c_star,
        c0: Tensor::zeros(&[4]),
        y,
    })
}

/// Calibration settings for the synthetic problem: default outer loop and
/// step sizes, proximal steps `δ_k = 1 − ᾱ_{t_k}`.
pub fn recovery_config() -> SapgConfig {
    let inner = LatinoConfig {
        steps: 4,
        delta_rule: Some("noise_level".into()),
        ..Default::default()
    };
    SapgConfig {
        final_pass: LatinoConfig {
            steps: 8,
            ..inner.clone()
        },
        inner,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub seed: u64,
    /// `‖ĉ − c*‖ / ‖c0 − c*‖`
    pub distance_ratio: f64,
    pub log_lik_c0: f64,
    pub log_lik_final: f64,
}

pub fn recovery_run(seed: u64) -> Result<RecoveryReport> {
    let p = recovery_problem(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let out = latino_pro_run(&p.y, &p.op, &p.prior, &p.c0, &recovery_config(), &mut rng)?;
    let c_hat = &out.state.c;
    Ok(RecoveryReport {
        seed,
        distance_ratio: c_hat.sub(&p.c_star).norm() / p.c0.sub(&p.c_star).norm(),
        log_lik_c0: p.prior.log_marginal_likelihood(&p.op, &p.y, &p.c0)?,
        log_lik_final: p.prior.log_marginal_likelihood(&p.op, &p.y, c_hat)?,
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl crate::operators::OpKind {
    pub fn name(self) -> &'static str {
        match self {
            crate::operators::OpKind::Conv => "conv",
            crate::operators::OpKind::Downsample => "downsample",
            crate::operators::OpKind::Mask => "mask",
            crate::operators::OpKind::Compose => "compose",
            crate::operators::OpKind::PhaseRetrieval => "phase_retrieval",
        }
    }
}
