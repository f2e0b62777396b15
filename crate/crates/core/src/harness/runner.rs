//! End-to-end runs: degrade (or load) a measurement, solve, score, persist.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ImageSource};
use super::demo::test_image;
use super::experiments::{conjugate_moments, conjugate_problem, conjugate_sampler_config, MomentReport};
use super::image_io::{load_image, save_image};
use super::metrics::psnr;
use super::tensor_io::{load_tensor, save_tensor};
use crate::error::{Error, Result};
use crate::operators::DegradationOp;
use crate::sae::{PriorContext, PriorHandle, PriorRegistry};
use crate::sampler::{run_chain, warm_start, ChainTrace, Sampler};
use crate::sapg::{sapg_with, PromptState};
use crate::tensor::Tensor;

pub const RECORD_VERSION: u32 = 1;

/// Ground truth (when known) and the measurement a run starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    pub ground_truth: Option<Tensor>,
    pub measurement: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// PSNR of the measurement (or `A† y` when shapes differ) against the truth.
    pub psnr_degraded: Option<f64>,
    pub psnr_restored: Option<f64>,
    /// `‖A x̂ − y‖`
    pub residual: Option<f64>,
    pub moments: Vec<MomentReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything needed to inspect and re-run one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub created_unix: u64,
    pub config: ExperimentConfig,
    pub ground_truth: Option<Tensor>,
    pub measurement: Option<Tensor>,
    /// Conditioning vector the chains started with.
    pub cond: Vec<f64>,
    /// One trace per chain, or one per calibration iteration followed by the
    /// final pass.
    pub traces: Vec<ChainTrace>,
    pub prompt: Option<PromptState>,
    pub estimate: Option<Tensor>,
    pub metrics: Metrics,
    pub timings: Vec<StageTiming>,
}

impl RunRecord {
    /// Copy with timestamps and wall-clock figures zeroed, for comparing runs.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        r.created_unix = 0;
        r.timings.iter_mut().for_each(|t| t.seconds = 0.0);
        r.metrics.moments.iter_mut().for_each(|m| m.seconds = 0.0);
        r
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunRecord = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if r.version != RECORD_VERSION {
            return Err(Error::Format(format!("unsupported run record version {}", r.version)));
        }
        Ok(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn seconds(&self, stage: &str) -> Option<f64> {
        self.timings.iter().find(|t| t.stage == stage).map(|t| t.seconds)
    }
}

/// Prior and sampler registries used by a run.
#[derive(Debug, Default)]
pub struct Runner {
    pub priors: PriorRegistry,
    pub sampler: Sampler,
}

fn read_any(path: &str) -> Result<Tensor> {
    if Path::new(path)
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
    {
        load_image(path)
    } else {
        load_tensor(path)
    }
}

pub fn load_ground_truth(source: &ImageSource) -> Result<Tensor> {
    match source {
        ImageSource::Demo { size } => test_image(*size),
        ImageSource::File { path } => read_any(path),
    }
}

/// `y = A x + σ_n ε` with `ε` drawn from the measurement seed.
pub fn degrade(x: &Tensor, op: &DegradationOp, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = op.apply(x)?;
    y.axpy(op.sigma_n(), &Tensor::randn(y.shape(), &mut rng));
    Ok(y)
}

/// Load or simulate the run inputs described by `cfg`.
pub fn prepare_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    let ground_truth = cfg
        .image
        .as_ref()
        .map(load_ground_truth)
        .transpose()
        .map_err(|e| e.at("load image"))?;
    let measurement = match (&cfg.measurement, &ground_truth) {
        (Some(path), _) => read_any(path).map_err(|e| e.at("load measurement"))?,
        (None, Some(x)) => {
            let op = cfg.operator.build(cfg.sigma_n).map_err(|e| e.at("operator"))?;
            degrade(x, &op, cfg.seeds.measurement).map_err(|e| e.at("degrade"))?
        }
        (None, None) => return Err(Error::Config("need an image or a measurement".into())),
    };
    Ok(Inputs {
        ground_truth,
        measurement,
    })
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct Clock {
    timings: Vec<StageTiming>,
    mark: Instant,
}

impl Clock {
    fn new() -> Self {
        Self {
            timings: Vec::new(),
            mark: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: self.mark.elapsed().as_secs_f64(),
        });
        self.mark = Instant::now();
    }
}

impl Runner {
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<RunRecord> {
        cfg.validate()?;
        if cfg.conjugate.is_some() {
            return self.run_conjugate(cfg);
        }
        let mut clock = Clock::new();
        let inputs = prepare_inputs(cfg)?;
        clock.lap("inputs");
        self.solve(cfg, inputs, clock)
    }

    /// Re-run a stored record from its own configuration and inputs.
    /// Nothing is written to disk.
    pub fn replay(&self, record: &RunRecord) -> Result<RunRecord> {
        let cfg = &ExperimentConfig {
            output_dir: None,
            ..record.config.clone()
        };
        if cfg.conjugate.is_some() {
            return self.run_conjugate(cfg);
        }
        let measurement = record
            .measurement
            .clone()
            .ok_or_else(|| Error::Format("record carries no measurement".into()))?;
        let inputs = Inputs {
            ground_truth: record.ground_truth.clone(),
            measurement,
        };
        self.solve(cfg, inputs, Clock::new())
    }

    fn open_prior(&self, cfg: &ExperimentConfig, image_shape: &[usize]) -> Result<PriorHandle> {
        let ctx = PriorContext {
            image_shape,
            analytic: &cfg.prior.analytic,
        };
        self.priors.open(&cfg.prior.source, &ctx)
    }

    fn solve(&self, cfg: &ExperimentConfig, inputs: Inputs, mut clock: Clock) -> Result<RunRecord> {
        let op = cfg.operator.build(cfg.sigma_n).map_err(|e| e.at("operator"))?;
        let y = &inputs.measurement;
        let x0 = warm_start(y, &op)?;
        let prior = self.open_prior(cfg, x0.shape()).map_err(|e| e.at("prior"))?;
        let c0 = match &cfg.prior.cond {
            Some(v) => Tensor::from_vec(v.clone()),
            None => Tensor::zeros(&[prior.cond_dim()]),
        };
        if c0.len() != prior.cond_dim() {
            return Err(Error::Config(format!(
                "conditioning vector has {} entries, prior expects {}",
                c0.len(),
                prior.cond_dim()
            ))
            .at("prior"));
        }
        clock.lap("prior");

        let (estimate, traces, prompt) = if let Some(sapg) = cfg.sapg_config() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.sampler);
            let out = sapg_with(&self.sampler, y, &op, prior.as_ref(), &c0, &sapg, &mut rng)
                .map_err(|e| e.at("sapg"))?;
            let mut traces = out.traces;
            traces.push(out.final_trace);
            (out.x, traces, Some(out.state))
        } else {
            let plan = self
                .sampler
                .plan(&cfg.sampler_config(), &op, prior.as_ref())
                .map_err(|e| e.at("sampler"))?;
            let outs: Vec<_> = (0..cfg.chains)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.sampler.wrapping_add(i as u64));
                    run_chain(y, &op, prior.as_ref(), &c0, &plan, x0.clone(), &mut rng)
                        .map_err(Error::from)
                })
                .collect::<Result<_>>()?;
            let mut mean = Tensor::zeros(x0.shape());
            let w = 1.0 / outs.len() as f64;
            for o in &outs {
                mean.axpy(w, &o.x);
            }
            (mean, outs.into_iter().map(|o| o.trace).collect(), None)
        };
        clock.lap("solve");

        let metrics = score(&op, y, inputs.ground_truth.as_ref(), &estimate).map_err(|e| e.at("metrics"))?;
        clock.lap("metrics");

        let record = RunRecord {
            version: RECORD_VERSION,
            created_unix: unix_now(),
            config: cfg.clone(),
            ground_truth: inputs.ground_truth,
            measurement: Some(inputs.measurement),
            cond: c0.into_data(),
            traces,
            prompt,
            estimate: Some(estimate),
            metrics,
            timings: clock.timings,
        };
        if let Some(dir) = &cfg.output_dir {
            persist(&record, dir).map_err(|e| e.at("output"))?;
        }
        Ok(record)
    }

    fn run_conjugate(&self, cfg: &ExperimentConfig) -> Result<RunRecord> {
        let check = cfg.conjugate.as_ref().expect("conjugate run");
        let mut clock = Clock::new();
        let mut moments = Vec::with_capacity(check.operators.len());
        for which in &check.operators {
            let problem = conjugate_problem(*which, check.problem_seed).map_err(|e| e.at("conjugate"))?;
            moments.push(
                conjugate_moments(&problem, &conjugate_sampler_config(), check.chains, cfg.seeds.sampler)
                    .map_err(|e| e.at("conjugate"))?,
            );
        }
        clock.lap("conjugate");
        let record = RunRecord {
            version: RECORD_VERSION,
            created_unix: unix_now(),
            config: cfg.clone(),
            ground_truth: None,
            measurement: None,
            cond: Vec::new(),
            traces: Vec::new(),
            prompt: None,
            estimate: None,
            metrics: Metrics {
                moments,
                ..Metrics::default()
            },
            timings: clock.timings,
        };
        if let Some(dir) = &cfg.output_dir {
            persist(&record, dir).map_err(|e| e.at("output"))?;
        }
        Ok(record)
    }
}

/// Run an experiment with the default registries.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    Runner::default().run(cfg)
}

fn score(op: &DegradationOp, y: &Tensor, truth: Option<&Tensor>, estimate: &Tensor) -> Result<Metrics> {
    let residual = op.residual(estimate, y).ok();
    let Some(x) = truth else {
        return Ok(Metrics {
            residual,
            ..Metrics::default()
        });
    };
    let degraded = if y.shape() == x.shape() {
        Some(y.clone())
    } else {
        op.pseudoinverse(y).ok().filter(|p| p.shape() == x.shape())
    };
    let psnr_degraded = degraded
        .map(|d| psnr(x, &d.clamp(0.0, 1.0)))
        .transpose()?;
    Ok(Metrics {
        psnr_degraded,
        psnr_restored: Some(psnr(x, &estimate.clamp(0.0, 1.0))?),
        residual,
        moments: Vec::new(),
    })
}

/// Write `record.json` plus the measurement, estimate and ground truth as
/// tensor files and PNGs.
pub fn persist(record: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, t: &Tensor, png: bool| -> Result<()> {
        let path = dir.join(format!("{name}.lten"));
        save_tensor(&path, t)?;
        written.push(path);
        if png && t.image_dims().is_ok_and(|(c, _, _)| c == 1 || c == 3) {
            let path = dir.join(format!("{name}.png"));
            save_image(&path, &t.clamp(0.0, 1.0))?;
            written.push(path);
        }
        Ok(())
    };
    if let Some(y) = &record.measurement {
        put("measurement", y, true)?;
    }
    if let Some(x) = &record.estimate {
        put("restored", x, true)?;
    }
    if let Some(x) = &record.ground_truth {
        put("truth", x, true)?;
    }
    let path = dir.join("record.json");
    std::fs::write(&path, record.to_json()?)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ConjugateCheck;
    use crate::harness::experiments::ConjugateOperator;
    use crate::sapg::SapgConfig;

    fn small_demo() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::deblur_demo();
        cfg.image = Some(ImageSource::Demo { size: 32 });
        cfg.chains = 2;
        cfg
    }

    #[test]
    fn demo_improves_and_is_deterministic() {
        let cfg = small_demo();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        let m = &a.metrics;
        assert!(m.psnr_restored.unwrap() > m.psnr_degraded.unwrap(), "{m:?}");
        assert_eq!(a.traces.len(), 2);
        assert!(a.traces.iter().all(|t| t.is_complete(4)));
        assert!(a.seconds("solve").is_some());
    }

    #[test]
    fn record_is_replayable() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_demo();
        cfg.output_dir = Some(dir.path().join("run"));
        let rec = run_experiment(&cfg).unwrap();
        let stored = RunRecord::load(dir.path().join("run/record.json")).unwrap();
        assert_eq!(stored, rec);
        let again = Runner::default().replay(&stored).unwrap();
        assert_eq!(again.metrics, rec.metrics);
        assert_eq!(again.estimate, rec.estimate);
        for name in ["measurement.lten", "restored.png", "truth.png"] {
            assert!(dir.path().join("run").join(name).exists(), "{name}");
        }
    }

    #[test]
    fn seeds_are_decoupled() {
        let cfg = small_demo();
        let base = prepare_inputs(&cfg).unwrap();
        let mut other = cfg.clone();
        other.seeds.sampler += 1;
        assert_eq!(prepare_inputs(&other).unwrap(), base);
        other.seeds.measurement += 1;
        assert_ne!(prepare_inputs(&other).unwrap().measurement, base.measurement);
    }

    #[test]
    fn precomputed_measurement() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_demo();
        let inputs = prepare_inputs(&cfg).unwrap();
        let path = dir.path().join("y.lten");
        save_tensor(&path, &inputs.measurement).unwrap();
        let mut from_file = cfg.clone();
        from_file.image = None;
        from_file.measurement = Some(path.to_string_lossy().into_owned());
        let rec = run_experiment(&from_file).unwrap();
        assert!(rec.metrics.psnr_restored.is_none());
        assert!(rec.metrics.residual.is_some());
    }

    #[test]
    fn calibrated_run_records_prompt_trajectory() {
        let mut cfg = small_demo();
        cfg.chains = 1;
        cfg.sapg = Some(SapgConfig {
            iterations: 3,
            ..SapgConfig::default()
        });
        let rec = run_experiment(&cfg).unwrap();
        let prompt = rec.prompt.as_ref().unwrap();
        assert_eq!(prompt.history.len(), 4);
        assert_eq!(rec.traces.len(), 4);
        assert_eq!(rec.traces.last().unwrap().steps.len(), 8);
    }

    #[test]
    fn conjugate_report() {
        let mut cfg = ExperimentConfig::conjugate_check();
        cfg.conjugate = Some(ConjugateCheck {
            operators: vec![ConjugateOperator::Identity],
            chains: 200,
            problem_seed: 1,
        });
        let rec = run_experiment(&cfg).unwrap();
        assert_eq!(rec.metrics.moments.len(), 1);
        let m = &rec.metrics.moments[0];
        assert_eq!(m.operator, "identity");
        assert!(m.mean_rel_err < 0.05, "{m:?}");
    }

    #[test]
    fn errors_carry_stage_labels() {
        let mut cfg = small_demo();
        cfg.prior.source = "nosuch".into();
        let e = run_experiment(&cfg).unwrap_err().to_string();
        assert!(e.starts_with("prior:"), "{e}");
        let mut cfg = small_demo();
        cfg.prior.cond = Some(vec![1.0]);
        assert!(run_experiment(&cfg).unwrap_err().to_string().starts_with("prior:"));
        let mut cfg = small_demo();
        cfg.image = Some(ImageSource::File {
            path: "/nonexistent.png".into(),
        });
        let e = run_experiment(&cfg).unwrap_err().to_string();
        assert!(e.starts_with("load image:"), "{e}");
    }
}
