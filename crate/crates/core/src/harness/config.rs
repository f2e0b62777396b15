//! Experiment configuration files (TOML).
//!
//! ```toml
//! name = "deblur_demo"
//! task = "gauss_deblur"
//! sigma_n = 0.01
//! chains = 4
//!
//! [image]
//! type = "demo"
//! size = 64
//!
//! [operator]
//! kind = "conv"
//! kernel = { type = "gaussian", size = 19, sigma = 3.0 }
//!
//! [prior]
//! source = "analytic"
//! [prior.analytic]
//! amplitude = 1.0
//!
//! [sampler]
//! steps = 4
//!
//! [seeds]
//! measurement = 1
//! sampler = 7
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiments::ConjugateOperator;
use crate::error::{Error, Result};
use crate::operators::{KernelSpec, OperatorSpec};
use crate::sae::AnalyticPriorSpec;
use crate::sampler::{LatinoConfig, Task};
use crate::sapg::SapgConfig;

/// Where the ground-truth image comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageSource {
    /// The bundled procedural test image.
    Demo { size: usize },
    /// A PNG (`.png`) or tensor file.
    File { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// `analytic`, `remote:HOST:PORT` or `stdio:COMMAND`.
    pub source: String,
    pub analytic: AnalyticPriorSpec,
    /// Conditioning vector (the initial one when calibrating); zeros when absent.
    pub cond: Option<Vec<f64>>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            source: "analytic".into(),
            analytic: AnalyticPriorSpec::default(),
            cond: None,
        }
    }
}

/// Measurement noise and sampler randomness use separate seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub measurement: u64,
    pub sampler: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            measurement: 1,
            sampler: 7,
        }
    }
}

/// Moment check against the closed-form posterior of the synthetic
/// conjugate problem. When present it replaces the restoration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConjugateCheck {
    pub operators: Vec<ConjugateOperator>,
    pub chains: usize,
    pub problem_seed: u64,
}

impl Default for ConjugateCheck {
    fn default() -> Self {
        Self {
            operators: vec![ConjugateOperator::Identity, ConjugateOperator::Blur],
            chains: 2000,
            problem_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: Task,
    pub sigma_n: f64,
    pub image: Option<ImageSource>,
    /// Precomputed measurement; skips the degradation stage.
    pub measurement: Option<String>,
    pub operator: OperatorSpec,
    pub prior: PriorConfig,
    pub sampler: LatinoConfig,
    /// Calibrate the conditioning vector before the final pass.
    pub sapg: Option<SapgConfig>,
    /// Independent chains averaged into the estimate.
    pub chains: usize,
    pub seeds: Seeds,
    pub output_dir: Option<PathBuf>,
    pub conjugate: Option<ConjugateCheck>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            task: Task::GaussDeblur,
            sigma_n: 0.01,
            image: None,
            measurement: None,
            operator: OperatorSpec::Identity,
            prior: PriorConfig::default(),
            sampler: LatinoConfig::default(),
            sapg: None,
            chains: 1,
            seeds: Seeds::default(),
            output_dir: None,
            conjugate: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_n > 0.0) || !self.sigma_n.is_finite() {
            return Err(Error::Config(format!("sigma_n must be positive, got {}", self.sigma_n)));
        }
        if self.chains == 0 {
            return Err(Error::Config("chains must be >= 1".into()));
        }
        if self.conjugate.is_none() && self.image.is_none() && self.measurement.is_none() {
            return Err(Error::Config("need an image or a measurement".into()));
        }
        if let Some(c) = &self.conjugate {
            if c.chains < 2 {
                return Err(Error::Config("the conjugate check needs at least two chains".into()));
            }
        }
        self.sampler_config().resolved_timesteps()?;
        if let Some(s) = &self.sapg {
            if self.chains > 1 {
                return Err(Error::Config("calibrated runs use a single chain".into()));
            }
            s.validate()?;
        }
        Ok(())
    }

    /// Sampler settings with the experiment's task applied.
    pub fn sampler_config(&self) -> LatinoConfig {
        LatinoConfig {
            task: self.task,
            ..self.sampler.clone()
        }
    }

    /// Calibration settings with the experiment's task applied to both passes.
    pub fn sapg_config(&self) -> Option<SapgConfig> {
        self.sapg.clone().map(|mut s| {
            s.inner.task = self.task;
            s.final_pass.task = self.task;
            s
        })
    }

    /// The smoothness-prior deblurring demo: 64x64 test image, Gaussian blur
    /// with σ = 3, noise 0.01, four averaged 4-step chains.
    pub fn deblur_demo() -> Self {
        Self {
            name: "deblur_demo".into(),
            task: Task::GaussDeblur,
            sigma_n: 0.01,
            image: Some(ImageSource::Demo { size: 64 }),
            operator: OperatorSpec::Conv {
                kernel: KernelSpec::Gaussian {
                    size: 19,
                    sigma: 3.0,
                },
            },
            prior: PriorConfig {
                analytic: AnalyticPriorSpec {
                    amplitude: 1.0,
                    corner: 2.0,
                    exponent: 2.0,
                    ..AnalyticPriorSpec::default()
                },
                ..PriorConfig::default()
            },
            chains: 4,
            ..Self::default()
        }
    }

    /// Moment comparison against the closed-form conjugate posterior.
    pub fn conjugate_check() -> Self {
        Self {
            name: "conjugate".into(),
            conjugate: Some(ConjugateCheck::default()),
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let mut with_sapg = ExperimentConfig::deblur_demo();
        with_sapg.sapg = Some(SapgConfig::default());
        with_sapg.chains = 1;
        with_sapg.prior.cond = Some(vec![0.1, -0.2, 0.3, 0.0]);
        with_sapg.output_dir = Some("out/demo".into());
        for cfg in [
            ExperimentConfig {
                measurement: Some("y.lten".into()),
                ..ExperimentConfig::default()
            },
            ExperimentConfig::deblur_demo(),
            ExperimentConfig::conjugate_check(),
            with_sapg,
        ] {
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg, "{text}");
        }
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            task = "sr8"
            [image]
            type = "demo"
            size = 64
            [operator]
            kind = "downsample"
            factor = 8
            mode = "avgpool"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.task, Task::Sr8);
        assert_eq!(cfg.sampler_config().task, Task::Sr8);
        assert_eq!(cfg.seeds, Seeds::default());
    }

    #[test]
    fn rejects_invalid_files() {
        assert!(ExperimentConfig::from_toml("name = \"no input\"").is_err());
        assert!(ExperimentConfig::from_toml("sigma_n = -1.0").is_err());
        assert!(ExperimentConfig::from_toml("chains = 0").is_err());
        assert!(ExperimentConfig::from_toml("unknown_key = 3").is_err());
        assert!(ExperimentConfig::from_toml("task = \"sr32\"").is_err());
        assert!(ExperimentConfig::from_toml("[sampler]\nsteps = 5").is_err());
        assert!(ExperimentConfig::from_toml("sigma_n = ").is_err());
        let mut multi = ExperimentConfig::deblur_demo();
        multi.sapg = Some(SapgConfig::default());
        assert!(multi.validate().is_err());
    }
}
