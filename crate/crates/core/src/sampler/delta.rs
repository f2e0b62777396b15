//! Proximal step sizes `δ_k`.
//!
//! Each rule maps the 1-based step index, the data residual `‖A u − y‖` at the
//! decoded image, the noise level and `ᾱ_{t_k}` to a step size. Rules are
//! registered by name and looked up at run time.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    GaussDeblur,
    MotionDeblur,
    Sr8,
    Sr16,
    Inpaint,
    Custom,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::GaussDeblur,
        Task::MotionDeblur,
        Task::Sr8,
        Task::Sr16,
        Task::Inpaint,
        Task::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::GaussDeblur => "gauss_deblur",
            Task::MotionDeblur => "motion_deblur",
            Task::Sr8 => "sr8",
            Task::Sr16 => "sr16",
            Task::Inpaint => "inpaint",
            Task::Custom => "custom",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "task",
                name: s.to_string(),
            })
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Quantities a step-size rule may depend on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepContext {
    /// 1-based step index.
    pub k: usize,
    pub residual: f64,
    pub sigma_n: f64,
    pub alpha_bar: f64,
}

impl StepContext {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("step index is 1-based"));
        }
        if !(self.residual >= 0.0) {
            return Err(Error::invalid(format!("residual must be >= 0, got {}", self.residual)));
        }
        if !(self.sigma_n > 0.0) {
            return Err(Error::invalid(format!("sigma_n must be > 0, got {}", self.sigma_n)));
        }
        if !(0.0..=1.0).contains(&self.alpha_bar) {
            return Err(Error::invalid(format!("alpha_bar must lie in [0, 1], got {}", self.alpha_bar)));
        }
        Ok(())
    }
}

pub trait StepSizeRule: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn delta(&self, ctx: &StepContext) -> f64;
}

/// `δ = C_k (1 − ᾱ) ‖A u − y‖ / σ_n` with `C_k = late` from step `switch_k` on.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualScaled {
    pub name: String,
    pub early: f64,
    pub late: f64,
    pub switch_k: usize,
}

impl StepSizeRule for ResidualScaled {
    fn name(&self) -> &str {
        &self.name
    }

    fn delta(&self, ctx: &StepContext) -> f64 {
        let c = if ctx.k >= self.switch_k {
            self.late
        } else {
            self.early
        };
        c * (1.0 - ctx.alpha_bar) * ctx.residual / ctx.sigma_n
    }
}

/// `δ = f_k (1 − ᾱ)` with `f_k = late` from step `switch_k` on, no residual factor.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseScaled {
    pub name: String,
    pub early: f64,
    pub late: f64,
    pub switch_k: usize,
}

impl StepSizeRule for NoiseScaled {
    fn name(&self) -> &str {
        &self.name
    }

    fn delta(&self, ctx: &StepContext) -> f64 {
        let f = if ctx.k >= self.switch_k {
            self.late
        } else {
            self.early
        };
        f * (1.0 - ctx.alpha_bar)
    }
}

/// `δ = σ² (√(1 + (1 − ᾱ)/σ²) − 1)`.
///
/// On a conjugate Gaussian problem with identity forward map this makes the
/// prox step contract the noise injected by the encoder by the same amount as
/// the exact posterior, so small-`t` chains reproduce posterior moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceMatched;

impl StepSizeRule for VarianceMatched {
    fn name(&self) -> &str {
        "variance_matched"
    }

    fn delta(&self, ctx: &StepContext) -> f64 {
        variance_matched_delta(1.0 - ctx.alpha_bar, ctx.sigma_n)
    }
}

pub fn variance_matched_delta(tau: f64, sigma_n: f64) -> f64 {
    let s2 = sigma_n * sigma_n;
    s2 * ((1.0 + tau / s2).sqrt() - 1.0)
}

/// A fixed list of step sizes, one per step.
#[derive(Clone, Debug, PartialEq)]
pub struct Explicit {
    pub deltas: Vec<f64>,
}

impl StepSizeRule for Explicit {
    fn name(&self) -> &str {
        "explicit"
    }

    fn delta(&self, ctx: &StepContext) -> f64 {
        self.deltas[ctx.k - 1]
    }
}

pub struct StepSizeRegistry {
    rules: BTreeMap<String, Arc<dyn StepSizeRule>>,
}

impl fmt::Debug for StepSizeRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.rules.keys()).finish()
    }
}

impl StepSizeRegistry {
    pub fn empty() -> Self {
        Self {
            rules: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, rule: Arc<dyn StepSizeRule>) {
        self.rules.insert(rule.name().to_string(), rule);
    }

    pub fn names(&self) -> Vec<&str> {
        self.rules.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn StepSizeRule>> {
        self.rules.get(name).cloned().ok_or_else(|| Error::UnknownName {
            kind: "step-size rule",
            name: name.to_string(),
        })
    }

    /// Default rule for a task. `custom` has none.
    pub fn for_task(&self, task: Task) -> Result<Arc<dyn StepSizeRule>> {
        if task == Task::Custom {
            return Err(Error::Config(
                "task `custom` needs explicit delta_overrides or a delta_rule".into(),
            ));
        }
        self.get(task.name())
    }
}

impl Default for StepSizeRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        let residual = |name: &str, early, late, switch_k| {
            Arc::new(ResidualScaled {
                name: name.to_string(),
                early,
                late,
                switch_k,
            })
        };
        r.register(residual("gauss_deblur", 4e-5, 2e-5, 5));
        r.register(residual("motion_deblur", 2e-6, 4e-6, 5));
        r.register(residual("sr8", 3e-3, 6e-3, 6));
        r.register(residual("sr16", 9e-3, 2e-2, 6));
        r.register(Arc::new(NoiseScaled {
            name: "inpaint".into(),
            early: 0.5,
            late: 1.0,
            switch_k: 5,
        }));
        r.register(Arc::new(NoiseScaled {
            name: "noise_level".into(),
            early: 1.0,
            late: 1.0,
            switch_k: 1,
        }));
        r.register(Arc::new(VarianceMatched));
        r
    }
}

/// Task step size with the default registry.
pub fn delta_schedule(task: Task, k: usize, residual: f64, sigma_n: f64, alpha_bar: f64) -> Result<f64> {
    let ctx = StepContext {
        k,
        residual,
        sigma_n,
        alpha_bar,
    };
    ctx.validate()?;
    Ok(StepSizeRegistry::default().for_task(task)?.delta(&ctx))
}

/// Evaluate a rule after validating its inputs.
pub fn evaluate(rule: &dyn StepSizeRule, ctx: &StepContext) -> Result<f64> {
    ctx.validate()?;
    let d = rule.delta(ctx);
    if !(d >= 0.0) || !d.is_finite() {
        return Err(Error::NonFinite(format!("step size from rule `{}`", rule.name())));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoted_examples() {
        let d = delta_schedule(Task::GaussDeblur, 6, 100.0 * 0.01, 0.01, 0.5).unwrap();
        assert_eq!(d, 2e-5 * 0.5 * 100.0);
        let d = delta_schedule(Task::Inpaint, 2, 123.0, 0.01, 0.2).unwrap();
        assert_eq!(d, 0.5 * (1.0 - 0.2));
        assert!((d - 0.4).abs() < 1e-15);
        for task in [Task::GaussDeblur, Task::MotionDeblur, Task::Sr8, Task::Sr16] {
            assert_eq!(delta_schedule(task, 3, 0.0, 0.1, 0.3).unwrap(), 0.0);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(delta_schedule(Task::Custom, 1, 1.0, 0.1, 0.5).is_err());
        assert!(delta_schedule(Task::Sr8, 1, -1.0, 0.1, 0.5).is_err());
        assert!(delta_schedule(Task::Sr8, 1, 1.0, 0.0, 0.5).is_err());
        assert!(delta_schedule(Task::Sr8, 0, 1.0, 0.1, 0.5).is_err());
        assert!("sr32".parse::<Task>().is_err());
        assert_eq!("motion_deblur".parse::<Task>().unwrap(), Task::MotionDeblur);
    }

    #[test]
    fn variance_matched_limits() {
        // small τ: δ ≈ τ/2; large τ: δ ≈ σ √τ
        let d = variance_matched_delta(1e-8, 1.0);
        assert!((d / 0.5e-8 - 1.0).abs() < 1e-6);
        let d = variance_matched_delta(1.0, 1e-4);
        assert!((d / 1e-4 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn registry_contents() {
        let r = StepSizeRegistry::default();
        assert_eq!(
            r.names(),
            vec![
                "gauss_deblur",
                "inpaint",
                "motion_deblur",
                "noise_level",
                "sr16",
                "sr8",
                "variance_matched"
            ]
        );
        assert!(r.get("nope").is_err());
    }
}
