//! Asynchronous DDPM/DDIM reverse steps and the mask-guided sampling loop.
//!
//! Every noise constant is looked up per pixel from that pixel's own
//! transition `t -> t_next` and broadcast across channels. With a uniform
//! field the steps reduce to the ordinary scalar-timestep samplers.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{aggregate_layers, extract_mask, LayerRule, Mask, TokenSelection};
use crate::denoiser::Denoiser;
use crate::error::{shape_err, Error, Result};
use crate::latent::LatentState;
use crate::noise::NoiseSchedule;
use crate::schedule::{transition_field, ScheduleFamily, TimestepField, TimestepMode};

/// Per-sample random stream. ChaCha is counter based, so each sample gets its
/// own independent stream selected by `stream`.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn mask_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b_5f72_6e67);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    #[default]
    Ddim,
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            _ => Err(Error::InvalidArgument(format!("unknown sampler '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// DDIM noise weight; ignored by DDPM.
    pub eta: f64,
    pub guidance_scale: f64,
    pub steps: usize,
    pub seed: u64,
    pub timestep_mode: TimestepMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            eta: 1.0,
            guidance_scale: 5.0,
            steps: 50,
            seed: 0,
            timestep_mode: TimestepMode::Continuous,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eta must be >= 0, got {}",
                self.eta
            )));
        }
        if !(self.guidance_scale >= 1.0 && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance scale must be >= 1, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct DdpmCoefficients {
    eps_scale: f64,
    sqrt_alpha: f64,
    sigma: f64,
}

fn ddpm_coefficients(schedule: &NoiseSchedule, t: f64, t_next: f64) -> DdpmCoefficients {
    let alpha_bar = schedule.alpha_bar(t);
    let alpha = schedule.step_alpha(t, t_next);
    DdpmCoefficients {
        eps_scale: (1.0 - alpha) / (1.0 - alpha_bar).sqrt(),
        sqrt_alpha: alpha.sqrt(),
        sigma: schedule.ddim_sigma(t, t_next, 1.0),
    }
}

#[inline]
fn ddpm_update(x: f64, eps: f64, c: DdpmCoefficients, z: f64) -> f64 {
    (x - c.eps_scale * eps) / c.sqrt_alpha + c.sigma * z
}

#[derive(Debug, Clone, Copy)]
struct DdimCoefficients {
    sqrt_alpha_bar: f64,
    sqrt_one_minus_alpha_bar: f64,
    sqrt_alpha_bar_next: f64,
    direction: f64,
    sigma: f64,
    identity: bool,
}

fn ddim_coefficients(schedule: &NoiseSchedule, t: f64, t_next: f64, eta: f64) -> Result<DdimCoefficients> {
    let alpha_bar = schedule.alpha_bar(t);
    let alpha_bar_next = schedule.target_alpha_bar(t, t_next);
    let sigma = schedule.ddim_sigma(t, t_next, eta);
    let residual = 1.0 - alpha_bar_next - sigma * sigma;
    if residual < -1e-12 {
        return Err(Error::Numerical(format!(
            "DDIM variance sigma^2 = {} exceeds 1 - alpha_bar = {} for step {t} -> {t_next} (eta {eta})",
            sigma * sigma,
            1.0 - alpha_bar_next
        )));
    }
    Ok(DdimCoefficients {
        sqrt_alpha_bar: alpha_bar.sqrt(),
        sqrt_one_minus_alpha_bar: (1.0 - alpha_bar).sqrt(),
        sqrt_alpha_bar_next: alpha_bar_next.sqrt(),
        direction: residual.max(0.0).sqrt(),
        sigma,
        identity: t_next == t,
    })
}

#[inline]
fn ddim_update(x: f64, eps: f64, c: DdimCoefficients, z: f64) -> f64 {
    if c.identity {
        return x;
    }
    let x0 = (x - c.sqrt_one_minus_alpha_bar * eps) / c.sqrt_alpha_bar;
    c.sqrt_alpha_bar_next * x0 + c.direction * eps + c.sigma * z
}

fn check_step_inputs(
    x: &LatentState,
    field: &TimestepField,
    next_field: &TimestepField,
    eps: &LatentState,
) -> Result<()> {
    x.check_same_shape(eps, "model output vs latent")?;
    for f in [field, next_field] {
        if (f.height(), f.width()) != (x.height(), x.width()) {
            return Err(shape_err(format!(
                "timestep field {}x{} vs latent {}x{}",
                f.height(),
                f.width(),
                x.height(),
                x.width()
            )));
        }
    }
    eps.check_finite("model output")?;
    if let Some(p) = field
        .values()
        .iter()
        .zip(next_field.values())
        .position(|(t, n)| n > t)
    {
        return Err(Error::Domain(format!(
            "pixel {p} would step from t={} up to t={}",
            field.values()[p],
            next_field.values()[p]
        )));
    }
    Ok(())
}

/// Applies `update` per element with one standard normal draw per element,
/// in storage order, whatever the per-pixel noise scale.
fn apply_per_pixel<C: Copy, R: Rng + ?Sized>(
    x: &LatentState,
    eps: &LatentState,
    coeffs: &[C],
    rng: &mut R,
    update: impl Fn(f64, f64, C, f64) -> f64,
) -> LatentState {
    let plane = x.pixels();
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(k, (&xv, &ev))| {
            let z: f64 = rng.sample(StandardNormal);
            update(xv, ev, coeffs[k % plane], z)
        })
        .collect();
    LatentState::from_vec(x.channels(), x.height(), x.width(), data).expect("shape preserved")
}

/// One ancestral DDPM step with per-pixel timesteps.
pub fn ddpm_step<R: Rng + ?Sized>(
    x: &LatentState,
    field: &TimestepField,
    next_field: &TimestepField,
    eps: &LatentState,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentState> {
    check_step_inputs(x, field, next_field, eps)?;
    let coeffs: Vec<DdpmCoefficients> = field
        .values()
        .iter()
        .zip(next_field.values())
        .map(|(&t, &n)| ddpm_coefficients(schedule, t, n))
        .collect();
    Ok(apply_per_pixel(x, eps, &coeffs, rng, ddpm_update))
}

/// One DDIM step with per-pixel timesteps; `eta = 0` is deterministic.
pub fn ddim_step<R: Rng + ?Sized>(
    x: &LatentState,
    field: &TimestepField,
    next_field: &TimestepField,
    eps: &LatentState,
    eta: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentState> {
    check_step_inputs(x, field, next_field, eps)?;
    let coeffs = field
        .values()
        .iter()
        .zip(next_field.values())
        .map(|(&t, &n)| ddim_coefficients(schedule, t, n, eta))
        .collect::<Result<Vec<_>>>()?;
    Ok(apply_per_pixel(x, eps, &coeffs, rng, ddim_update))
}

fn scalar_step<R: Rng + ?Sized>(
    config: &SamplerConfig,
    x: &LatentState,
    t: f64,
    t_next: f64,
    eps: &LatentState,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentState> {
    x.check_same_shape(eps, "model output vs latent")?;
    eps.check_finite("model output")?;
    let plane = x.pixels();
    Ok(match config.kind {
        SamplerKind::Ddpm => {
            let c = ddpm_coefficients(schedule, t, t_next);
            apply_per_pixel(x, eps, &vec![c; plane], rng, ddpm_update)
        }
        SamplerKind::Ddim => {
            let c = ddim_coefficients(schedule, t, t_next, config.eta)?;
            apply_per_pixel(x, eps, &vec![c; plane], rng, ddim_update)
        }
    })
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &LatentState, eps_cond: &LatentState, scale: f64) -> Result<LatentState> {
    eps_uncond.check_same_shape(eps_cond, "guidance inputs")?;
    if !(scale >= 1.0) {
        return Err(Error::InvalidArgument(format!("guidance scale {scale} < 1")));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| u + scale * (c - u))
        .collect();
    LatentState::from_vec(
        eps_uncond.channels(),
        eps_uncond.height(),
        eps_uncond.width(),
        data,
    )
}

/// How the guidance mask evolves during sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskPolicy {
    /// Re-extracted every step from the conditional pass's cross-attention.
    Dynamic {
        selection: TokenSelection,
        rule: LayerRule,
    },
    /// A user-supplied mask held for the whole trajectory.
    Fixed(Mask),
    /// Mask is all zeros: every pixel follows the linear schedule.
    None,
    /// Independent Bernoulli(density) masks each step, from a dedicated stream.
    Random { density: f64 },
}

impl MaskPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            MaskPolicy::Dynamic { .. } => "dynamic",
            MaskPolicy::Fixed(_) => "fixed",
            MaskPolicy::None => "none",
            MaskPolicy::Random { .. } => "random",
        }
    }
}

/// Result of one trajectory.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub final_state: LatentState,
    /// Timestep fields `t_0 .. t_T` (only when tracing).
    pub fields: Vec<TimestepField>,
    /// Mask driving transition `i` (only when tracing).
    pub masks: Vec<Mask>,
}

/// Mask-guided asynchronous sampler.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub family: ScheduleFamily,
    pub noise: NoiseSchedule,
    pub config: SamplerConfig,
    pub policy: MaskPolicy,
    pub record_trace: bool,
}

impl Sampler {
    pub fn new(
        family: ScheduleFamily,
        noise: NoiseSchedule,
        config: SamplerConfig,
        policy: MaskPolicy,
    ) -> Result<Self> {
        config.validate()?;
        let steps = config.steps as f64;
        if family.horizon() != steps || noise.horizon() != steps {
            return Err(Error::InvalidArgument(format!(
                "schedule horizon {} / noise horizon {} must equal steps {}",
                family.horizon(),
                noise.horizon(),
                config.steps
            )));
        }
        if let MaskPolicy::Random { density } = policy {
            if !(0.0..=1.0).contains(&density) {
                return Err(Error::InvalidArgument(format!(
                    "mask density {density} not in [0, 1]"
                )));
            }
        }
        Ok(Self {
            family,
            noise,
            config,
            policy,
            record_trace: false,
        })
    }

    pub fn with_trace(mut self, record: bool) -> Self {
        self.record_trace = record;
        self
    }

    fn horizon(&self) -> f64 {
        self.config.steps as f64
    }

    fn predict_eps(
        &self,
        denoiser: &dyn Denoiser,
        x: &LatentState,
        field: &TimestepField,
        tokens: Option<&[usize]>,
    ) -> Result<(LatentState, Option<crate::attention::CrossAttentionMaps>)> {
        let cond = denoiser.predict(x, field, tokens)?;
        if cond.eps.shape() != x.shape() {
            return Err(shape_err("denoiser output shape differs from its input"));
        }
        let eps = match tokens {
            Some(_) if self.config.guidance_scale > 1.0 => {
                let uncond = denoiser.predict(x, field, None)?;
                cfg_combine(&uncond.eps, &cond.eps, self.config.guidance_scale)?
            }
            _ => cond.eps,
        };
        Ok((eps, cond.maps))
    }

    fn random_mask(&self, h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> Mask {
        let values = (0..h * w).map(|_| rng.random::<f64>() < density).collect();
        Mask::from_values(h, w, values).expect("dims")
    }

    /// Draws `x_T ~ N(0, I)` from the sample's stream and runs the loop.
    pub fn sample(
        &self,
        denoiser: &dyn Denoiser,
        tokens: Option<&[usize]>,
        shape: (usize, usize, usize),
        stream: u64,
    ) -> Result<SampleOutput> {
        let mut rng = sample_rng(self.config.seed, stream);
        let x = LatentState::standard_normal(shape.0, shape.1, shape.2, &mut rng);
        self.run(denoiser, tokens, x, &mut rng, stream)
    }

    /// Runs the asynchronous loop from a given initial latent.
    pub fn run(
        &self,
        denoiser: &dyn Denoiser,
        tokens: Option<&[usize]>,
        mut x: LatentState,
        rng: &mut ChaCha8Rng,
        stream: u64,
    ) -> Result<SampleOutput> {
        let (h, w) = (x.height(), x.width());
        let mut masks_rng = mask_rng(self.config.seed, stream);
        let mut field = TimestepField::initial(h, w, self.horizon());
        let mut mask = match &self.policy {
            MaskPolicy::Dynamic { .. } => Mask::filled(h, w, true),
            MaskPolicy::Fixed(m) => {
                if (m.height(), m.width()) != (h, w) {
                    return Err(shape_err("fixed mask does not match the latent grid"));
                }
                m.clone()
            }
            MaskPolicy::None => Mask::filled(h, w, false),
            MaskPolicy::Random { density } => self.random_mask(h, w, *density, &mut masks_rng),
        };
        let mut fields = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..self.config.steps {
            let next = transition_field(&field, &mask, &self.family, self.config.timestep_mode)?;
            let (eps, maps) = self.predict_eps(denoiser, &x, &field, tokens)?;
            x = match self.config.kind {
                SamplerKind::Ddpm => ddpm_step(&x, &field, &next, &eps, &self.noise, rng)?,
                SamplerKind::Ddim => ddim_step(&x, &field, &next, &eps, self.config.eta, &self.noise, rng)?,
            };
            let new_mask = match &self.policy {
                MaskPolicy::Dynamic { selection, rule } => {
                    let maps = maps.ok_or_else(|| {
                        Error::InvalidArgument(
                            "dynamic mask policy needs a denoiser that reports cross-attention".into(),
                        )
                    })?;
                    let agg = aggregate_layers(&maps, (h, w), *rule)?;
                    Some(extract_mask(&agg, selection, (h, w))?)
                }
                MaskPolicy::Random { density } => Some(self.random_mask(h, w, *density, &mut masks_rng)),
                MaskPolicy::Fixed(_) | MaskPolicy::None => None,
            };
            if self.record_trace {
                fields.push(field);
                masks.push(mask.clone());
            }
            field = next;
            if let Some(m) = new_mask {
                mask = m;
            }
        }
        if self.record_trace {
            fields.push(field);
        }
        Ok(SampleOutput {
            final_state: x,
            fields,
            masks,
        })
    }

    /// The ordinary scalar-timestep sampler `t_i = T - i`, sharing seeds and
    /// random streams with [`Sampler::sample`].
    pub fn sample_synchronous(
        &self,
        denoiser: &dyn Denoiser,
        tokens: Option<&[usize]>,
        shape: (usize, usize, usize),
        stream: u64,
    ) -> Result<SampleOutput> {
        let mut rng = sample_rng(self.config.seed, stream);
        let mut x = LatentState::standard_normal(shape.0, shape.1, shape.2, &mut rng);
        let horizon = self.horizon();
        let (h, w) = (shape.1, shape.2);
        let mut fields = Vec::new();
        let mut masks = Vec::new();
        for i in 0..self.config.steps {
            let t = horizon - i as f64;
            let t_next = horizon - (i + 1) as f64;
            let field = TimestepField::uniform(h, w, horizon, i, t);
            let (eps, _) = self.predict_eps(denoiser, &x, &field, tokens)?;
            x = scalar_step(&self.config, &x, t, t_next, &eps, &self.noise, &mut rng)?;
            if self.record_trace {
                fields.push(field);
                masks.push(Mask::filled(h, w, false));
            }
        }
        if self.record_trace {
            fields.push(TimestepField::uniform(h, w, horizon, self.config.steps, 0.0));
        }
        Ok(SampleOutput {
            final_state: x,
            fields,
            masks,
        })
    }
}
