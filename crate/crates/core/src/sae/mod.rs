//! Stochastic auto-encoder built from a consistency model.
//!
//! The encoder maps an image to a noisy latent at diffusion time `t`, the
//! decoder maps it back through the consistency function and the ambient
//! decoder. Priors implement [`Prior`]; the analytic Gaussian prior does so in
//! closed form and [`RemotePrior`] forwards every call over the frame protocol.

pub mod analytic;
pub mod protocol;
pub mod remote;
pub mod schedule;
pub mod server;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use analytic::{AnalyticGaussianPrior, AnalyticPriorSpec, GaussianPosterior};
pub use protocol::HelloInfo;
pub use remote::RemotePrior;
pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind};
pub use server::{serve_connection, serve_tcp, spawn_echo_server, EchoService, PriorService};

/// Central finite-difference step used when a prior cannot differentiate itself.
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Analytic,
    Remote,
}

pub trait Prior: Send + Sync + fmt::Debug {
    fn kind(&self) -> PriorKind;

    fn latent_shape(&self) -> Vec<usize>;

    /// Ambient image shape, when the prior knows it.
    fn image_shape(&self) -> Option<Vec<usize>>;

    fn cond_dim(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    /// Timesteps accepted by [`Prior::consistency`]; `None` means all of `0..=T`.
    fn timesteps(&self) -> Option<Vec<u32>>;

    fn supports_timestep(&self, t: u32) -> bool {
        t <= self.schedule().t_max() && self.timesteps().is_none_or(|ts| ts.contains(&t))
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor>;

    fn decode(&self, z: &Tensor) -> Result<Tensor>;

    /// Consistency function `G(z_t, t, c)`.
    fn consistency(&self, z_t: &Tensor, t: u32, c: &Tensor) -> Result<Tensor>;

    /// `∇_c log p(z_next | z_prev, c)` when the prior can compute it itself.
    fn grad_logcond(
        &self,
        _z_next: &Tensor,
        _z_prev: &Tensor,
        _t_prev: u32,
        _t_next: u32,
        _c: &Tensor,
    ) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn as_analytic(&self) -> Option<&AnalyticGaussianPrior> {
        None
    }
}

pub type PriorHandle = Arc<dyn Prior>;

fn check_cond(prior: &dyn Prior, c: &Tensor) -> Result<()> {
    if c.len() != prior.cond_dim() {
        return Err(Error::shape(format!(
            "conditioning vector has {} entries, prior expects {}",
            c.len(),
            prior.cond_dim()
        )));
    }
    Ok(())
}

/// `z_t = √ᾱ_t E(x) + √(1 − ᾱ_t) ε`
pub fn encode_stochastic<R: Rng + ?Sized>(
    x: &Tensor,
    t: u32,
    prior: &dyn Prior,
    rng: &mut R,
) -> Result<Tensor> {
    prior.schedule().check(t)?;
    let ab = prior.schedule().alpha_bar(t);
    let z = prior.encode(x)?;
    if t == 0 {
        return Ok(z);
    }
    let eps = Tensor::randn(z.shape(), rng);
    let mut out = z.scale(ab.sqrt());
    out.axpy((1.0 - ab).sqrt(), &eps);
    Ok(out)
}

pub fn consistency_apply(z_t: &Tensor, t: u32, c: &Tensor, prior: &dyn Prior) -> Result<Tensor> {
    prior.schedule().check(t)?;
    check_cond(prior, c)?;
    prior.consistency(z_t, t, c)
}

/// One stochastic auto-encoding pass `D(G(E_t(x), t, c))`.
pub fn sae_step<R: Rng + ?Sized>(
    x: &Tensor,
    t: u32,
    c: &Tensor,
    prior: &dyn Prior,
    rng: &mut R,
) -> Result<Tensor> {
    let z = encode_stochastic(x, t, prior, rng)?;
    prior.decode(&consistency_apply(&z, t, c, prior)?)
}

/// `log p(z_next | z_prev, c)` up to an additive constant independent of `c`:
/// `−‖z_next − √ᾱ_next G(z_prev, t_prev, c)‖² / (2 (1 − ᾱ_next))`.
pub fn log_transition(
    z_next: &Tensor,
    z_prev: &Tensor,
    t_prev: u32,
    t_next: u32,
    c: &Tensor,
    prior: &dyn Prior,
) -> Result<f64> {
    let var = analytic::transition_variance(prior.schedule(), t_next)?;
    let g = consistency_apply(z_prev, t_prev, c, prior)?;
    if g.shape() != z_next.shape() {
        return Err(Error::shape("latent shapes in transition"));
    }
    let san = prior.schedule().alpha_bar(t_next).sqrt();
    let r = z_next.zip_map(&g, |a, b| a - san * b);
    Ok(-r.norm_sq() / (2.0 * var))
}

/// Central finite differences of [`log_transition`] in `c`.
pub fn grad_logcond_fd(
    z_next: &Tensor,
    z_prev: &Tensor,
    t_prev: u32,
    t_next: u32,
    c: &Tensor,
    prior: &dyn Prior,
    step: f64,
) -> Result<Tensor> {
    let mut cp = c.clone();
    let mut g = vec![0.0; c.len()];
    for (j, gj) in g.iter_mut().enumerate() {
        let orig = c.data()[j];
        cp.data_mut()[j] = orig + step;
        let up = log_transition(z_next, z_prev, t_prev, t_next, &cp, prior)?;
        cp.data_mut()[j] = orig - step;
        let down = log_transition(z_next, z_prev, t_prev, t_next, &cp, prior)?;
        cp.data_mut()[j] = orig;
        *gj = (up - down) / (2.0 * step);
    }
    Tensor::new(c.shape().to_vec(), g)
}

/// How to obtain `∇_c log p(z_next | z_prev, c)` when the prior cannot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradFallback {
    FiniteDifference,
    Disabled,
}

/// `∇_c log p(z_next | z_prev, c)`, from the prior or by finite differences.
pub fn grad_logcond_c(
    z_next: &Tensor,
    z_prev: &Tensor,
    t_prev: u32,
    t_next: u32,
    c: &Tensor,
    prior: &dyn Prior,
) -> Result<Tensor> {
    grad_logcond_c_with(
        z_next,
        z_prev,
        t_prev,
        t_next,
        c,
        prior,
        GradFallback::FiniteDifference,
    )
}

pub fn grad_logcond_c_with(
    z_next: &Tensor,
    z_prev: &Tensor,
    t_prev: u32,
    t_next: u32,
    c: &Tensor,
    prior: &dyn Prior,
    fallback: GradFallback,
) -> Result<Tensor> {
    check_cond(prior, c)?;
    if let Some(g) = prior.grad_logcond(z_next, z_prev, t_prev, t_next, c)? {
        return Ok(g);
    }
    match fallback {
        GradFallback::FiniteDifference => {
            grad_logcond_fd(z_next, z_prev, t_prev, t_next, c, prior, FD_STEP)
        }
        GradFallback::Disabled => Err(Error::invalid(
            "prior does not provide conditional gradients and finite differences are disabled",
        )),
    }
}

/// `‖z − E(D(z))‖`, the auto-encoding mismatch of a prior at `z`.
pub fn autoencoding_gap(z: &Tensor, prior: &dyn Prior) -> Result<f64> {
    let back = prior.encode(&prior.decode(z)?)?;
    if back.shape() != z.shape() {
        return Err(Error::shape("encoder output shape differs from latent shape"));
    }
    Ok(back.sub(z).norm())
}

/// Inputs available to prior factories.
#[derive(Clone, Debug)]
pub struct PriorContext<'a> {
    pub image_shape: &'a [usize],
    pub analytic: &'a AnalyticPriorSpec,
}

pub type PriorFactory = Box<dyn Fn(&str, &PriorContext<'_>) -> Result<PriorHandle> + Send + Sync>;

/// Priors selectable by a `scheme[:argument]` string, e.g. `analytic` or
/// `remote:127.0.0.1:7070`.
pub struct PriorRegistry {
    factories: BTreeMap<String, PriorFactory>,
}

impl fmt::Debug for PriorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl PriorRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, scheme: &str, factory: PriorFactory) {
        self.factories.insert(scheme.to_string(), factory);
    }

    pub fn schemes(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn open(&self, spec: &str, ctx: &PriorContext<'_>) -> Result<PriorHandle> {
        let (scheme, arg) = spec.split_once(':').unwrap_or((spec, ""));
        let factory = self.factories.get(scheme).ok_or_else(|| Error::UnknownName {
            kind: "prior",
            name: scheme.to_string(),
        })?;
        factory(arg, ctx)
    }
}

impl Default for PriorRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(
            "analytic",
            Box::new(|arg, ctx| {
                if !arg.is_empty() {
                    return Err(Error::Config("the analytic prior takes no argument".into()));
                }
                Ok(Arc::new(ctx.analytic.build(ctx.image_shape)?))
            }),
        );
        r.register(
            "remote",
            Box::new(|arg, _| {
                if arg.is_empty() {
                    return Err(Error::Config("remote prior needs HOST:PORT".into()));
                }
                Ok(Arc::new(RemotePrior::connect(arg)?))
            }),
        );
        r.register(
            "stdio",
            Box::new(|arg, _| {
                let mut parts = arg.split_whitespace();
                let program = parts
                    .next()
                    .ok_or_else(|| Error::Config("stdio prior needs a command".into()))?;
                let args: Vec<&str> = parts.collect();
                Ok(Arc::new(RemotePrior::spawn(program, &args)?))
            }),
        );
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use protocol::{read_frame, write_frame, Opcode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::net::TcpStream;

    fn prior(shape: &[usize]) -> AnalyticGaussianPrior {
        AnalyticPriorSpec::default().build(shape).unwrap()
    }

    #[test]
    fn encode_stochastic_basics() {
        let p = prior(&[1, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 4, 4], &mut rng);
        let z0 = encode_stochastic(&x, 0, &p, &mut rng).unwrap();
        assert_eq!(z0, p.encode(&x).unwrap());
        assert!(encode_stochastic(&x, 1001, &p, &mut rng).is_err());
        let a = encode_stochastic(&x, 500, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = encode_stochastic(&x, 500, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_at_t_max_is_standard_normal() {
        let p = prior(&[1, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::full(&[1, 4, 4], 0.9);
        let n = 10_000;
        let mut sum = vec![0.0; 16];
        for _ in 0..n {
            let z = encode_stochastic(&x, 1000, &p, &mut rng).unwrap();
            for (s, v) in sum.iter_mut().zip(z.data()) {
                *s += v;
            }
        }
        for s in sum {
            assert!((s / n as f64).abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn sae_step_at_zero_returns_decodable_input() {
        let p = prior(&[1, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Tensor::randn(&[4], &mut rng);
        let x = p.decode(&Tensor::randn(&[16], &mut rng)).unwrap();
        let out = sae_step(&x, 0, &c, &p, &mut rng).unwrap();
        assert!(out.sub(&x).max_abs() < 1e-5);
    }

    #[test]
    fn sae_step_at_t_max_samples_prior() {
        let p = prior(&[1, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Tensor::randn(&[4], &mut rng);
        let mean = p.mean(&c).unwrap();
        let x = Tensor::full(&[1, 4, 4], 3.0);
        let n = 10_000;
        let mut sum = Tensor::zeros(&[1, 4, 4]);
        for _ in 0..n {
            sum.axpy(1.0, &sae_step(&x, 1000, &c, &p, &mut rng).unwrap());
        }
        let emp = sum.scale(1.0 / n as f64);
        // per-pixel prior standard deviation from the synthesis matrix
        let b = p.synthesis_matrix().unwrap();
        for i in 0..16 {
            let var: f64 = (0..16).map(|j| b[(i, j)].powi(2) * p.variances()[j]).sum();
            let tol = 4.0 * var.sqrt() / (n as f64).sqrt();
            assert!((emp.data()[i] - mean.data()[i]).abs() < tol, "pixel {i}");
        }
    }

    #[test]
    fn sae_step_contracts_toward_prior_mean() {
        let p = prior(&[1, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Tensor::randn(&[4], &mut rng);
        let mean = p.mean(&c).unwrap();
        let chains = 500;
        let mut xs: Vec<Tensor> = (0..chains).map(|_| Tensor::full(&[1, 4, 4], 10.0)).collect();
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let mut avg = Tensor::zeros(&[1, 4, 4]);
            for x in xs.iter_mut() {
                *x = sae_step(x, 60, &c, &p, &mut rng).unwrap();
                avg.axpy(1.0 / chains as f64, x);
            }
            let dist = avg.sub(&mean).norm();
            assert!(dist < prev);
            prev = dist;
        }
    }

    #[test]
    fn sae_step_leaves_prior_invariant() {
        let p = prior(&[1, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = Tensor::randn(&[4], &mut rng);
        let w = p.latent_mean(&c).unwrap();
        let n = 10_000;
        for t in [124u32, 500, 999] {
            let mut m1 = vec![0.0; 16];
            let mut m2 = vec![0.0; 16];
            for _ in 0..n {
                let x = p.sample(&c, &mut rng).unwrap();
                let z = p.encode(&sae_step(&x, t, &c, &p, &mut rng).unwrap()).unwrap();
                for i in 0..16 {
                    let u = (z.data()[i] - w.data()[i]) / p.variances()[i].sqrt();
                    m1[i] += u / n as f64;
                    m2[i] += u * u / n as f64;
                }
            }
            let tol = 5.0 / (n as f64).sqrt();
            for i in 0..16 {
                assert!(m1[i].abs() < tol, "t={t} mean {i}: {}", m1[i]);
                assert!((m2[i] - 1.0).abs() < tol * 2f64.sqrt(), "t={t} second moment {i}: {}", m2[i]);
            }
        }
    }

    #[test]
    fn closed_form_gradient_matches_finite_differences() {
        let p = prior(&[1, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ts = [124u32, 249, 499, 749, 999];
        for _ in 0..50 {
            let c = Tensor::randn(&[4], &mut rng);
            let z_prev = Tensor::randn(&[64], &mut rng);
            let z_next = Tensor::randn(&[64], &mut rng);
            let t_prev = ts[rng.random_range(0..ts.len())];
            let t_next = ts[rng.random_range(0..ts.len())];
            let g = grad_logcond_c(&z_next, &z_prev, t_prev, t_next, &c, &p).unwrap();
            let fd = grad_logcond_fd(&z_next, &z_prev, t_prev, t_next, &c, &p, FD_STEP).unwrap();
            assert!(g.sub(&fd).norm() <= 1e-5 * fd.norm(), "{g:?} vs {fd:?}");
        }
    }

    #[test]
    fn gradient_vanishes_without_dependence_or_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = AnalyticPriorSpec {
            cond_scale: 0.0,
            ..Default::default()
        };
        let p0 = spec.build(&[1, 4, 4]).unwrap();
        let c = Tensor::randn(&[4], &mut rng);
        let z_prev = Tensor::randn(&[16], &mut rng);
        let z_next = Tensor::randn(&[16], &mut rng);
        let g = grad_logcond_c(&z_next, &z_prev, 999, 749, &c, &p0).unwrap();
        assert_eq!(g.max_abs(), 0.0);

        let p = prior(&[1, 4, 4]);
        let sab = p.schedule().alpha_bar(749).sqrt();
        let z_next = p.consistency(&z_prev, 999, &c).unwrap().scale(sab);
        let g = grad_logcond_c(&z_next, &z_prev, 999, 749, &c, &p).unwrap();
        assert!(g.max_abs() < 1e-12);
        assert!(grad_logcond_c(&z_next, &z_prev, 999, 0, &c, &p).is_err());
    }

    fn echo_info() -> HelloInfo {
        HelloInfo {
            latent_shape: vec![1, 8, 8],
            cond_dim: 3,
            timesteps: vec![999, 749, 499, 249],
        }
    }

    #[test]
    fn echo_round_trip_is_bit_exact() {
        let (addr, _h) = spawn_echo_server(echo_info()).unwrap();
        let remote = RemotePrior::connect(&addr.to_string()).unwrap();
        assert_eq!(remote.info(), &echo_info());
        assert_eq!(remote.latent_shape(), vec![1, 8, 8]);
        assert!(remote.supports_timestep(749));
        assert!(!remote.supports_timestep(750));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::randn(&[1, 8, 8], &mut rng).round_to_f32();
        let c = Tensor::randn(&[3], &mut rng);
        assert_eq!(remote.decode(&z).unwrap(), z);
        assert_eq!(remote.encode(&z).unwrap(), z);
        let out = consistency_apply(&z, 499, &c, &remote).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8]);
        assert_eq!(out, z);
        assert_eq!(autoencoding_gap(&z, &remote).unwrap(), 0.0);
    }

    #[test]
    fn echo_errors_surface() {
        let (addr, _h) = spawn_echo_server(echo_info()).unwrap();
        let remote = RemotePrior::connect(&addr.to_string()).unwrap();
        let z = Tensor::zeros(&[1, 8, 8]);
        let c = Tensor::zeros(&[3]);
        let e = consistency_apply(&z, 500, &c, &remote).unwrap_err();
        assert!(matches!(&e, Error::Remote(m) if m.contains("unsupported timestep")), "{e}");
        // the connection survives a request-level error
        assert!(remote.consistency(&z, 249, &c).is_ok());
        // no server-side gradient, finite differences through the protocol
        assert!(remote.grad_logcond(&z, &z, 999, 749, &c).unwrap().is_none());
        let g = grad_logcond_c(&z, &z, 999, 749, &c, &remote).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        let e = grad_logcond_c_with(&z, &z, 999, 749, &c, &remote, GradFallback::Disabled);
        assert!(e.is_err());
    }

    #[test]
    fn unknown_opcode_and_garbage_get_error_frames() {
        let (addr, _h) = spawn_echo_server(echo_info()).unwrap();
        let mut s = TcpStream::connect(addr).unwrap();
        write_frame(&mut s, 0x42, &[]).unwrap();
        let f = read_frame(&mut s).unwrap().unwrap();
        assert_eq!(f.opcode, Opcode::Error as u8);
        assert!(String::from_utf8(f.payload).unwrap().contains("opcode"));
        use std::io::Write;
        s.write_all(b"GARBAGE!!!").unwrap();
        let f = read_frame(&mut s).unwrap().unwrap();
        assert_eq!(f.opcode, Opcode::Error as u8);
        assert!(read_frame(&mut s).unwrap().is_none());
    }

    #[test]
    fn registry_dispatch() {
        let reg = PriorRegistry::default();
        assert_eq!(reg.schemes(), vec!["analytic", "remote", "stdio"]);
        let spec = AnalyticPriorSpec::default();
        let ctx = PriorContext {
            image_shape: &[1, 4, 4],
            analytic: &spec,
        };
        let p = reg.open("analytic", &ctx).unwrap();
        assert_eq!(p.kind(), PriorKind::Analytic);
        assert!(matches!(reg.open("bogus", &ctx), Err(Error::UnknownName { .. })));
        assert!(reg.open("remote", &ctx).is_err());
        let (addr, _h) = spawn_echo_server(echo_info()).unwrap();
        let r = reg.open(&format!("remote:{addr}"), &ctx).unwrap();
        assert_eq!(r.kind(), PriorKind::Remote);
    }
}
