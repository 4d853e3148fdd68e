//! Step-to-timestep schedulers and per-pixel timestep transitions.
//!
//! A scheduler maps the denoising step index `i` in `[0, T]` to a timestep
//! `t = f(i)` with `f(0) = T` and `f(T) = 0`. Pixels inside the guidance mask
//! follow a shifted copy `f(i - a) + b` of a concave scheduler that passes
//! through their current `(i, t)` and still lands on `(T, 0)`; all other
//! pixels follow the straight chord to `(T, 0)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::Mask;
use crate::error::{shape_err, Error, Result};

/// Slack used when checking band membership of floating-point timesteps.
pub const BAND_TOLERANCE: f64 = 1e-9;

const BISECTION_TOL: f64 = 1e-12;
const BISECTION_MAX_ITER: usize = 200;

/// Base scheduler curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Curve {
    /// `g(i) = T - i`, the standard synchronous schedule.
    Linear,
    /// `f(i) = T - i^2 / T`.
    Quadratic,
    /// `f(i) = min(T - i/2, 3T/2 - 3i/2)`.
    PiecewiseLinear,
    /// `f(i) = T/(e-1) * (e - e^(i/T))`.
    Exponential,
    /// `f(i) = min(T, 2T - 2i)`; maximal gap `T/2` against the linear schedule.
    ExtremeClamp,
}

impl Curve {
    pub const ALL: [Curve; 5] = [
        Curve::Linear,
        Curve::Quadratic,
        Curve::PiecewiseLinear,
        Curve::Exponential,
        Curve::ExtremeClamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Curve::Linear => "linear",
            Curve::Quadratic => "quadratic",
            Curve::PiecewiseLinear => "piecewise-linear",
            Curve::Exponential => "exponential",
            Curve::ExtremeClamp => "extreme-clamp",
        }
    }

    fn eval(self, horizon: f64, i: f64) -> f64 {
        let t = horizon;
        match self {
            Curve::Linear => t - i,
            Curve::Quadratic => t - i * i / t,
            Curve::PiecewiseLinear => (t - 0.5 * i).min(1.5 * t - 1.5 * i),
            Curve::Exponential => {
                let e = std::f64::consts::E;
                t / (e - 1.0) * (e - (i / t).exp())
            }
            Curve::ExtremeClamp => t.min(2.0 * t - 2.0 * i),
        }
    }
}

impl fmt::Display for Curve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Curve {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Curve::ALL
            .into_iter()
            .find(|c| c.name() == s || c.name().replace('-', "_") == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown schedule family '{s}'")))
    }
}

/// Scheduler shape, optionally blended with the linear schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Plain(Curve),
    /// `f' = omega * f_base + (1 - omega) * g` with `omega` in `(0, 1)`.
    Reweighted {
        base: Curve,
        omega: f64,
    },
}

/// A scheduler curve over the step axis `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFamily {
    kind: ScheduleKind,
    horizon: f64,
}

impl ScheduleFamily {
    pub fn new(curve: Curve, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self {
            kind: ScheduleKind::Plain(curve),
            horizon,
        })
    }

    pub fn linear(horizon: f64) -> Result<Self> {
        Self::new(Curve::Linear, horizon)
    }

    pub fn quadratic(horizon: f64) -> Result<Self> {
        Self::new(Curve::Quadratic, horizon)
    }

    /// Blends `curve` with the linear schedule: `omega * f + (1 - omega) * g`.
    pub fn reweighted(curve: Curve, omega: f64, horizon: f64) -> Result<Self> {
        if !(omega > 0.0 && omega < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "reweighting omega must lie in (0, 1), got {omega}"
            )));
        }
        let mut family = Self::new(curve, horizon)?;
        family.kind = ScheduleKind::Reweighted { base: curve, omega };
        Ok(family)
    }

    /// `omega == 1` yields the plain curve.
    pub fn with_omega(curve: Curve, omega: f64, horizon: f64) -> Result<Self> {
        if omega == 1.0 {
            Self::new(curve, horizon)
        } else {
            Self::reweighted(curve, omega, horizon)
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn base_curve(&self) -> Curve {
        match self.kind {
            ScheduleKind::Plain(c) | ScheduleKind::Reweighted { base: c, .. } => c,
        }
    }

    pub fn omega(&self) -> f64 {
        match self.kind {
            ScheduleKind::Plain(_) => 1.0,
            ScheduleKind::Reweighted { omega, .. } => omega,
        }
    }

    /// True when the curve coincides with the linear schedule.
    pub fn is_linear(&self) -> bool {
        self.base_curve() == Curve::Linear
    }

    /// Evaluates the curve, rejecting step indices outside `[0, T]`.
    pub fn eval(&self, i: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&i) {
            return Err(Error::Domain(format!(
                "step index {i} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(self.value(i))
    }

    /// Unchecked evaluation; boundaries are returned exactly.
    pub(crate) fn value(&self, i: f64) -> f64 {
        let horizon = self.horizon;
        if i <= 0.0 {
            return horizon;
        }
        if i >= horizon {
            return 0.0;
        }
        match self.kind {
            ScheduleKind::Plain(c) => c.eval(horizon, i),
            ScheduleKind::Reweighted { base, omega } => {
                omega * base.eval(horizon, i) + (1.0 - omega) * (horizon - i)
            }
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            ScheduleKind::Plain(c) => c.name().to_string(),
            ScheduleKind::Reweighted { base, omega } => format!("{}@omega={omega}", base.name()),
        }
    }
}

/// Translation `(a, b)` making `f(i - a) + b` pass through a target point and `(T, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSolution {
    pub a: f64,
    pub b: f64,
}

impl ShiftSolution {
    /// Shifted curve value at step `i`.
    pub fn apply(&self, family: &ScheduleFamily, i: f64) -> f64 {
        family.value(i - self.a) + self.b
    }
}

/// Closed-form shift of the quadratic curve, used as a cross-check in debug builds.
fn quadratic_closed_form(horizon: f64, i0: f64, t0: f64) -> f64 {
    (horizon + i0) / 2.0 - horizon * t0 / (2.0 * (horizon - i0))
}

/// Solves `f(i0 - a) + b = t0`, `f(T - a) + b = 0` for the unique `a` in `[0, i0]`.
///
/// `g(a) = f(i0 - a) - f(T - a)` is nonincreasing for concave `f`, so plain
/// bisection brackets the root. Where `g` is flat (piecewise-linear curves)
/// the smallest root is returned, which keeps `a = 0` a fixed point for points
/// already on the unshifted curve.
pub fn solve_shift(family: &ScheduleFamily, i0: f64, t0: f64) -> Result<ShiftSolution> {
    let horizon = family.horizon();
    if !(i0 >= 0.0 && i0 < horizon) || !t0.is_finite() {
        return Err(Error::Domain(format!(
            "shift requested at step {i0}, timestep {t0} (horizon {horizon})"
        )));
    }
    let lower = horizon - i0;
    let upper = family.value(i0);
    if family.is_linear() && (t0 - lower).abs() > BAND_TOLERANCE {
        return Err(Error::Degenerate { i0, t0 });
    }
    if t0 < lower - BAND_TOLERANCE || t0 > upper + BAND_TOLERANCE {
        return Err(Error::OutOfRange { i0, t0, lower, upper });
    }
    let t0 = t0.clamp(lower, upper);
    if family.is_linear() || i0 == 0.0 {
        return Ok(ShiftSolution { a: 0.0, b: 0.0 });
    }

    let gap = |a: f64| family.value(i0 - a) - family.value(horizon - a);
    let a = if gap(0.0) <= t0 {
        0.0
    } else {
        // invariant: gap(lo) > t0 >= gap(hi)
        let (mut lo, mut hi) = (0.0, i0);
        for _ in 0..BISECTION_MAX_ITER {
            if hi - lo <= BISECTION_TOL {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if gap(mid) > t0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let solution = ShiftSolution {
        a,
        b: -family.value(horizon - a),
    };
    debug_assert!(
        family.kind() != ScheduleKind::Plain(Curve::Quadratic)
            || (quadratic_closed_form(horizon, i0, t0).clamp(0.0, i0) - a).abs() < 1e-8,
        "bisection disagrees with the quadratic closed form"
    );
    Ok(solution)
}

/// Next timestep of a pixel following the shifted concave curve through `(i, t)`.
pub fn advance_concave(family: &ScheduleFamily, i: f64, t: f64) -> Result<f64> {
    let shift = solve_shift(family, i, t)?;
    Ok(shift.apply(family, i + 1.0))
}

/// Next timestep along the chord from `(i, t)` to `(T, 0)`.
pub fn advance_linear(horizon: f64, i: f64, t: f64) -> Result<f64> {
    if !(i >= 0.0 && i < horizon) {
        return Err(Error::Domain(format!(
            "no linear transition from step {i} (horizon {horizon})"
        )));
    }
    let lower = horizon - i;
    if t < lower - BAND_TOLERANCE || t > horizon + BAND_TOLERANCE {
        return Err(Error::OutOfRange {
            i0: i,
            t0: t,
            lower,
            upper: horizon,
        });
    }
    Ok(t * (horizon - i - 1.0) / (horizon - i))
}

/// Maximum of `f(i) - (T - i)` over `[0, T]`.
///
/// The difference of a concave curve and a line is concave, so a dense grid
/// scan followed by a ternary refinement around the best cell finds the
/// maximum to machine precision.
pub fn max_timestep_gap(family: &ScheduleFamily) -> f64 {
    const GRID: usize = 10_000;
    let horizon = family.horizon();
    let gap = |i: f64| family.value(i) - (horizon - i);
    let (best_k, mut best) = (0..=GRID)
        .map(|k| (k, gap(horizon * k as f64 / GRID as f64)))
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, cur| if cur.1 > acc.1 { cur } else { acc },
        );
    let mut lo = horizon * best_k.saturating_sub(1) as f64 / GRID as f64;
    let mut hi = horizon * (best_k + 1).min(GRID) as f64 / GRID as f64;
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if gap(m1) < gap(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    best = best.max(gap(0.5 * (lo + hi)));
    best
}

/// Whether transitions keep continuous timesteps or snap them to integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestepMode {
    #[default]
    Continuous,
    Rounded,
}

impl FromStr for TimestepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(Self::Continuous),
            "rounded" => Ok(Self::Rounded),
            _ => Err(Error::InvalidArgument(format!("unknown timestep mode '{s}'"))),
        }
    }
}

/// Per-pixel timestep state at a given step index.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepField {
    height: usize,
    width: usize,
    horizon: f64,
    step_index: usize,
    values: Vec<f64>,
}

impl TimestepField {
    /// Field at step 0 with every pixel at pure noise.
    pub fn initial(height: usize, width: usize, horizon: f64) -> Self {
        Self::uniform(height, width, horizon, 0, horizon)
    }

    pub fn uniform(height: usize, width: usize, horizon: f64, step_index: usize, t: f64) -> Self {
        Self {
            height,
            width,
            horizon,
            step_index,
            values: vec![t; height * width],
        }
    }

    pub fn from_values(
        height: usize,
        width: usize,
        horizon: f64,
        step_index: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape_err(format!(
                "timestep field expects {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(bad) = values
            .iter()
            .find(|t| !(t.is_finite() && **t >= 0.0 && **t <= horizon + BAND_TOLERANCE))
        {
            return Err(Error::Domain(format!("timestep {bad} outside [0, {horizon}]")));
        }
        Ok(Self {
            height,
            width,
            horizon,
            step_index,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// The common timestep if every pixel shares it.
    pub fn uniform_value(&self) -> Option<f64> {
        let first = *self.values.first()?;
        self.values.iter().all(|&t| t == first).then_some(first)
    }

    /// Checks `T - i <= t <= f(i)` for every pixel, and `t = 0` at `i = T`.
    pub fn check_band(&self, family: &ScheduleFamily) -> Result<()> {
        let i = self.step_index as f64;
        let lower = self.horizon - i;
        let upper = family.value(i);
        for (p, &t) in self.values.iter().enumerate() {
            if t < lower - BAND_TOLERANCE || t > upper + BAND_TOLERANCE {
                return Err(Error::Domain(format!(
                    "pixel {p} at step {i} has timestep {t} outside [{lower}, {upper}]"
                )));
            }
        }
        Ok(())
    }
}

/// Advances every pixel one step: masked pixels along the shifted `family`
/// curve, the rest along the chord to `(T, 0)`.
///
/// Any per-pixel failure aborts the whole transition.
pub fn transition_field(
    field: &TimestepField,
    mask: &Mask,
    family: &ScheduleFamily,
    mode: TimestepMode,
) -> Result<TimestepField> {
    if mask.height() != field.height || mask.width() != field.width {
        return Err(shape_err(format!(
            "mask {}x{} vs timestep field {}x{}",
            mask.height(),
            mask.width(),
            field.height,
            field.width
        )));
    }
    if (family.horizon() - field.horizon).abs() > 0.0 {
        return Err(Error::InvalidArgument(format!(
            "schedule horizon {} differs from field horizon {}",
            family.horizon(),
            field.horizon
        )));
    }
    let horizon = field.horizon;
    let i = field.step_index as f64;
    if i >= horizon {
        return Err(Error::Domain(format!(
            "field already at terminal step {}",
            field.step_index
        )));
    }
    let next_i = i + 1.0;
    let values = field
        .values
        .iter()
        .zip(mask.values())
        .map(|(&t, &masked)| {
            if t <= 0.0 {
                return Ok(0.0);
            }
            let next = if masked {
                advance_concave(family, i, t)?
            } else {
                advance_linear(horizon, i, t)?
            };
            Ok(match mode {
                TimestepMode::Continuous => next,
                TimestepMode::Rounded => next
                    .round()
                    .clamp((horizon - next_i).ceil().max(0.0), family.value(next_i).floor()),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(TimestepField {
        height: field.height,
        width: field.width,
        horizon,
        step_index: field.step_index + 1,
        values,
    })
}
