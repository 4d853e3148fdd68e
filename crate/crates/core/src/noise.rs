//! Forward-process constants over continuous timesteps.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::TimestepField;

/// Offset keeping the cosine `alpha_bar` inside `[1e-4, 1 - 1e-4]`.
const COSINE_OFFSET: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// `alpha_bar(t) = 1e-4 + (1 - 2e-4) cos^2(pi t / 2T)`.
    Cosine,
    /// Linear betas over `train_steps` grid points, log-linear between them.
    DiscreteLinearBeta {
        beta_start: f64,
        beta_end: f64,
        train_steps: usize,
    },
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear-beta" | "discrete-linear-beta" => Ok(Self::DiscreteLinearBeta {
                beta_start: 1e-4,
                beta_end: 0.02,
                train_steps: 1000,
            }),
            _ => Err(Error::InvalidArgument(format!("unknown noise schedule '{s}'"))),
        }
    }
}

/// Noise constants `alpha_bar`, `alpha`, `beta`, `sigma` at continuous `t` in `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: NoiseKind,
    horizon: f64,
    log_alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: NoiseKind, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid horizon {horizon}")));
        }
        let log_alpha_bar = match kind {
            NoiseKind::Cosine => Vec::new(),
            NoiseKind::DiscreteLinearBeta {
                beta_start,
                beta_end,
                train_steps,
            } => {
                if train_steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "invalid beta schedule ({beta_start}, {beta_end}, {train_steps})"
                    )));
                }
                let mut acc = 0.0;
                (0..train_steps)
                    .map(|k| {
                        let frac = k as f64 / (train_steps - 1) as f64;
                        let beta = beta_start + (beta_end - beta_start) * frac;
                        acc += (1.0 - beta).ln();
                        acc
                    })
                    .collect()
            }
        };
        Ok(Self {
            kind,
            horizon,
            log_alpha_bar,
        })
    }

    pub fn cosine(horizon: f64) -> Self {
        Self::new(NoiseKind::Cosine, horizon).expect("positive horizon")
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Cumulative signal retention at timestep `t`.
    pub fn alpha_bar(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.horizon);
        match self.kind {
            NoiseKind::Cosine => {
                let c = (t / self.horizon * std::f64::consts::FRAC_PI_2).cos();
                COSINE_OFFSET + (1.0 - 2.0 * COSINE_OFFSET) * c * c
            }
            NoiseKind::DiscreteLinearBeta { .. } => {
                let last = self.log_alpha_bar.len() - 1;
                let u = t / self.horizon * last as f64;
                let k = (u.floor() as usize).min(last);
                let log = if k == last {
                    self.log_alpha_bar[last]
                } else {
                    let frac = u - k as f64;
                    self.log_alpha_bar[k] * (1.0 - frac) + self.log_alpha_bar[k + 1] * frac
                };
                log.exp()
            }
        }
    }

    /// `alpha_bar` at the end of a step `t -> t_next`; reaching `t_next = 0`
    /// from a positive `t` lands on clean data (`alpha_bar = 1`).
    pub fn target_alpha_bar(&self, t: f64, t_next: f64) -> f64 {
        if t_next <= 0.0 && t > 0.0 {
            1.0
        } else {
            self.alpha_bar(t_next)
        }
    }

    /// Per-step retention `alpha_bar(t) / alpha_bar(t_next)` of a transition.
    pub fn step_alpha(&self, t: f64, t_next: f64) -> f64 {
        self.alpha_bar(t) / self.target_alpha_bar(t, t_next)
    }

    /// Unit-step `alpha(t)`, i.e. the retention of the step `t -> t - 1`.
    pub fn alpha(&self, t: f64) -> f64 {
        self.step_alpha(t, (t - 1.0).max(0.0))
    }

    pub fn beta(&self, t: f64) -> f64 {
        1.0 - self.alpha(t)
    }

    /// DDIM noise scale of the step `t -> t_next`; `eta = 1` is the DDPM posterior scale.
    pub fn ddim_sigma(&self, t: f64, t_next: f64, eta: f64) -> f64 {
        if eta == 0.0 {
            return 0.0;
        }
        let ab = self.alpha_bar(t);
        let ab_next = self.target_alpha_bar(t, t_next);
        let ratio = ((1.0 - ab_next) / (1.0 - ab)).max(0.0);
        eta * ratio.sqrt() * (1.0 - ab / ab_next).max(0.0).sqrt()
    }
}

/// Per-pixel constants at the timesteps of a field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConstants {
    pub height: usize,
    pub width: usize,
    pub alpha_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Element-wise lookup of `alpha_bar`, unit-step `alpha` and `beta` over a field.
pub fn constants_field(schedule: &NoiseSchedule, field: &TimestepField) -> FieldConstants {
    let ts = field.values();
    FieldConstants {
        height: field.height(),
        width: field.width(),
        alpha_bar: ts.iter().map(|&t| schedule.alpha_bar(t)).collect(),
        alpha: ts.iter().map(|&t| schedule.alpha(t)).collect(),
        beta: ts.iter().map(|&t| schedule.beta(t)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedules() -> Vec<NoiseSchedule> {
        vec![
            NoiseSchedule::cosine(50.0),
            NoiseSchedule::new("linear-beta".parse().unwrap(), 50.0).unwrap(),
        ]
    }

    #[test]
    fn endpoints() {
        for s in schedules() {
            assert!(1.0 - s.alpha_bar(0.0) <= 1e-4 + 1e-15);
            assert!(s.alpha_bar(50.0) <= 1e-3);
        }
    }

    #[test]
    fn strictly_decreasing_on_dense_grid() {
        for s in schedules() {
            let mut prev = s.alpha_bar(0.0);
            for k in 1..=5000 {
                let cur = s.alpha_bar(50.0 * k as f64 / 5000.0);
                assert!(cur < prev, "not decreasing at k={k}");
                prev = cur;
            }
        }
    }

    #[test]
    fn discrete_grid_matches_cumulative_product() {
        let s = NoiseSchedule::new(
            NoiseKind::DiscreteLinearBeta {
                beta_start: 1e-4,
                beta_end: 0.02,
                train_steps: 11,
            },
            10.0,
        )
        .unwrap();
        let mut prod = 1.0;
        for k in 0..11 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * k as f64 / 10.0);
            assert!((s.alpha_bar(k as f64) - prod).abs() < 1e-14);
        }
    }

    #[test]
    fn sigma_zero_at_eta_zero() {
        let s = NoiseSchedule::cosine(50.0);
        assert_eq!(s.ddim_sigma(30.0, 29.0, 0.0), 0.0);
        assert_eq!(s.ddim_sigma(30.0, 30.0, 1.0), 0.0);
        assert_eq!(s.ddim_sigma(1.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn constants_follow_pixels() {
        let s = NoiseSchedule::cosine(50.0);
        let field = TimestepField::from_values(1, 2, 50.0, 0, vec![0.0, 50.0]).unwrap();
        let c = constants_field(&s, &field);
        assert!(c.alpha_bar[0] > 0.999 && c.alpha_bar[1] < 1e-3);
        assert!((c.alpha[1] + c.beta[1] - 1.0).abs() < 1e-15);
    }
}
