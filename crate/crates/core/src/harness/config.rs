use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::LayerRule;
use crate::data::{GaussianStructure, SUPPORTED_DIMS};
use crate::denoiser::TrainConfig;
use crate::error::{Error, Result};
use crate::noise::{NoiseKind, NoiseSchedule};
use crate::sampler::{SamplerConfig, SamplerKind};
use crate::schedule::{Curve, ScheduleFamily, TimestepMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicyName {
    None,
    Dynamic,
    Fixed,
    Random,
}

/// Where a fixed mask comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedMaskSource {
    None,
    All,
    /// Central square covering half the side.
    Center,
    /// Union of the sample's ground-truth object masks.
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserSource {
    Checkpoint,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageFormat {
    Ppm,
    Png,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaussianKind {
    Isotropic,
    Smooth,
}

/// Every experiment knob, as one flat key-value document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Worker threads; 0 picks the available parallelism.
    pub threads: usize,

    pub family: Curve,
    pub omega: f64,
    pub steps: usize,
    pub timestep_mode: TimestepMode,
    pub noise_schedule: String,

    pub sampler: SamplerKind,
    pub eta: f64,
    pub guidance_scale: f64,
    pub mask_policy: MaskPolicyName,
    pub mask_density: f64,
    pub fixed_mask: FixedMaskSource,
    pub attention_rule: LayerRule,
    pub denoiser: DenoiserSource,
    pub samples: usize,
    pub image_format: ImageFormat,
    pub omega_sweep: Vec<f64>,

    pub dims: usize,
    pub dataset_size: usize,

    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub cond_dropout: f64,
    pub per_pixel_timesteps: bool,
    pub features: usize,
    pub log_every: usize,

    pub gaussian_side: usize,
    pub gaussian_structure: GaussianKind,
    pub gaussian_variance: f64,
    pub gaussian_length_scale: f64,
    pub eval_samples: usize,
    pub mean_tolerance: f64,
    pub covariance_tolerance: f64,
    /// Coarse step count for the discretization trend check; 0 skips it.
    pub trend_steps: usize,

    pub eval_images: usize,
    /// Noise levels, as fractions of `steps`, at which attention is captured.
    pub mask_eval_levels: Vec<f64>,
    pub baseline_draws: usize,
    pub iou_ratio_gate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 0,
            out_dir: "runs/default".into(),
            data_dir: "data/shapes".into(),
            checkpoint_dir: "checkpoints/default".into(),
            threads: 0,
            family: Curve::Quadratic,
            omega: 1.0,
            steps: 50,
            timestep_mode: TimestepMode::Continuous,
            noise_schedule: "cosine".into(),
            sampler: SamplerKind::Ddim,
            eta: 1.0,
            guidance_scale: 5.0,
            mask_policy: MaskPolicyName::Dynamic,
            mask_density: 0.5,
            fixed_mask: FixedMaskSource::None,
            attention_rule: LayerRule::QuarterResolution,
            denoiser: DenoiserSource::Checkpoint,
            samples: 4,
            image_format: ImageFormat::Ppm,
            omega_sweep: Vec::new(),
            dims: 32,
            dataset_size: 1024,
            train_steps: train.steps,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            clip_norm: train.clip_norm,
            cond_dropout: train.cond_dropout,
            per_pixel_timesteps: train.per_pixel_timesteps,
            features: 16,
            log_every: train.log_every,
            gaussian_side: 4,
            gaussian_structure: GaussianKind::Smooth,
            gaussian_variance: 1.0,
            gaussian_length_scale: 1.0,
            eval_samples: 20_000,
            mean_tolerance: 0.05,
            covariance_tolerance: 0.10,
            trend_steps: 10,
            eval_images: 64,
            mask_eval_levels: vec![0.1, 0.2, 0.3],
            baseline_draws: 8,
            iou_ratio_gate: 1.5,
        }
    }
}

/// Parses a command-line value as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Splits `--key value` / `--key=value` pairs; dashes in keys map to underscores.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("expected --key, got '{arg}'")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag --{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

impl RunConfig {
    /// Loads an optional TOML file and applies overrides on top.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match file {
            Some(path) => fs::read_to_string(path)?
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            None => toml::Table::new(),
        };
        if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::Config(format!("config must be flat; '{key}' is a table")));
        }
        for (key, value) in overrides {
            table.insert(key.clone(), parse_value(value));
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_DIMS.contains(&self.dims) {
            return Err(Error::Config(format!(
                "dims {} not in {SUPPORTED_DIMS:?}",
                self.dims
            )));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::Config(format!("omega {} not in (0, 1]", self.omega)));
        }
        if let Some(w) = self.omega_sweep.iter().find(|&&w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::Config(format!("omega_sweep entry {w} not in (0, 1]")));
        }
        if let Some(l) = self.mask_eval_levels.iter().find(|&&l| !(l > 0.0 && l < 1.0)) {
            return Err(Error::Config(format!("mask_eval_levels entry {l} not in (0, 1)")));
        }
        if self.mask_policy == MaskPolicyName::Fixed && self.fixed_mask == FixedMaskSource::None {
            return Err(Error::Config(
                "mask_policy = fixed needs a fixed_mask source".into(),
            ));
        }
        self.sampler_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.noise_kind()?;
        Ok(())
    }

    pub fn noise_kind(&self) -> Result<NoiseKind> {
        self.noise_schedule
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn noise(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.noise_kind()?, self.steps as f64)
    }

    pub fn family(&self) -> Result<ScheduleFamily> {
        ScheduleFamily::with_omega(self.family, self.omega, self.steps as f64)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler,
            eta: self.eta,
            guidance_scale: self.guidance_scale,
            steps: self.steps,
            seed: self.seed,
            timestep_mode: self.timestep_mode,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            clip_norm: self.clip_norm,
            cond_dropout: self.cond_dropout,
            seed: self.seed,
            per_pixel_timesteps: self.per_pixel_timesteps,
            log_every: self.log_every,
        }
    }

    pub fn gaussian_structure(&self) -> GaussianStructure {
        match self.gaussian_structure {
            GaussianKind::Isotropic => GaussianStructure::Isotropic {
                variance: self.gaussian_variance,
            },
            GaussianKind::Smooth => GaussianStructure::Smooth {
                variance: self.gaussian_variance,
                length_scale: self.gaussian_length_scale,
            },
        }
    }

    pub fn worker_count(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
