use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    LinearDdpm,
}

/// Variance-preserving noise schedule: `alpha_bar[t] = prod_{s<=t} (1 - beta[s])`,
/// with `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_T: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("noise schedule needs T >= 1"));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("betas must lie in (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Linear betas from 1e-4 to 2e-2 over `t_max` steps.
    pub fn linear_ddpm(t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("noise schedule needs T >= 1"));
        }
        let betas = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn t_max(&self) -> u32 {
        self.betas.len() as u32
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: u32) -> f64 {
        self.betas[t as usize - 1]
    }

    pub fn alpha_bar(&self, t: u32) -> f64 {
        self.alpha_bar[t as usize]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check(&self, t: u32) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [0, {}]",
                self.t_max()
            )));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear_ddpm(DEFAULT_T).expect("default schedule")
    }
}

pub fn make_schedule(kind: ScheduleKind, t_max: usize) -> Result<NoiseSchedule> {
    match kind {
        ScheduleKind::LinearDdpm => NoiseSchedule::linear_ddpm(t_max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
        // direct cumulative product oracle
        let mut p = 1.0;
        for i in 0..1000 {
            p *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - p).abs() < 1e-15);
        assert!((s.alpha_bar(1000) - 4.035_829_765_375_675e-5).abs() < 1e-12);
    }

    #[test]
    fn strictly_decreasing() {
        let s = NoiseSchedule::default();
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0]);
            assert!(w[1] > 0.0);
        }
        assert!(NoiseSchedule::linear_ddpm(0).is_err());
        assert_eq!(NoiseSchedule::linear_ddpm(1).unwrap().alpha_bar(1), 1.0 - 1e-4);
    }
}
