use std::fs;
use std::path::Path;

use log::{info, warn};

use super::config::{DenoiserSource, FixedMaskSource, MaskPolicyName, RunConfig};
use super::eval::{self, fast_region, laplacian_energy, moment_errors, oracle_samples, score_masks};
use super::output::{mask_image, write_image, write_run_manifest, write_trace_csv, EvalReport, MetricResult};
use super::trace::{self, OMEGA_GRID};
use crate::attention::{Mask, TokenSelection};
use crate::data::{generate_sample, generate_shapes, make_gaussian_spec, ShapesDataset, ShapesSample};
use crate::denoiser::{train, Checkpoint, Denoiser, GaussianOracle, NetConfig, TinyCondDenoiser};
use crate::error::{Error, Result};
use crate::sampler::{MaskPolicy, SampleOutput, Sampler};
use crate::schedule::{Curve, ScheduleFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Sample,
    EvalGaussian,
    EvalMask,
    ScheduleTrace,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Sample => "sample",
            Command::EvalGaussian => "eval-gaussian",
            Command::EvalMask => "eval-mask",
            Command::ScheduleTrace => "schedule-trace",
        }
    }
}

/// What a command produced; `passed` is false only when a gated metric failed.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub report: Option<EvalReport>,
    pub outputs: Vec<String>,
}

impl Outcome {
    fn files(outputs: Vec<String>) -> Self {
        Self {
            passed: true,
            report: None,
            outputs,
        }
    }
}

pub fn run(command: Command, config: &RunConfig) -> Result<Outcome> {
    config.validate()?;
    let outcome = match command {
        Command::GenData => cmd_gen_data(config)?,
        Command::Train => cmd_train(config)?,
        Command::Sample => cmd_sample(config)?,
        Command::EvalGaussian => cmd_eval_gaussian(config)?,
        Command::EvalMask => cmd_eval_mask(config)?,
        Command::ScheduleTrace => cmd_schedule_trace(config)?,
    };
    write_run_manifest(&config.out_dir, command.name(), config, &outcome.outputs)?;
    Ok(outcome)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

pub fn cmd_gen_data(config: &RunConfig) -> Result<Outcome> {
    let dataset = generate_shapes(config.dataset_size, config.dims, config.seed)?;
    dataset.save(&config.data_dir)?;
    info!(
        "wrote {} samples ({}x{}) to {}",
        dataset.len(),
        config.dims,
        config.dims,
        config.data_dir.display()
    );
    Ok(Outcome::files(vec![path_str(&config.data_dir)]))
}

pub fn net_config(config: &RunConfig) -> NetConfig {
    NetConfig {
        features: config.features,
        horizon: config.steps as f64,
        ..NetConfig::default()
    }
}

pub fn cmd_train(config: &RunConfig) -> Result<Outcome> {
    let dataset = ShapesDataset::load(&config.data_dir).map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!(
            "cannot read dataset at {}: {io}",
            config.data_dir.display()
        )),
        other => other,
    })?;
    let model = TinyCondDenoiser::new(net_config(config), config.seed)?;
    let noise = config.noise()?;
    info!(
        "training on {} images for {} steps",
        dataset.len(),
        config.train_steps
    );
    let checkpoint = train(
        model,
        &dataset.training_examples(),
        &noise,
        &config.train_config(),
        &dataset.fingerprint()?,
    )?;
    checkpoint.save(&config.checkpoint_dir)?;
    fs::create_dir_all(&config.out_dir)?;
    let curve: String = std::iter::once("step,loss\n".to_string())
        .chain(
            checkpoint
                .metadata
                .loss_curve
                .iter()
                .enumerate()
                .map(|(k, l)| format!("{k},{l}\n")),
        )
        .collect();
    let curve_path = config.out_dir.join("loss_curve.csv");
    fs::write(&curve_path, curve)?;
    if let Some(last) = checkpoint.metadata.loss_curve.last() {
        info!("final batch loss {last:.5}");
    }
    Ok(Outcome::files(vec![
        path_str(&config.checkpoint_dir),
        path_str(&curve_path),
    ]))
}

fn fixed_mask(source: FixedMaskSource, side: (usize, usize), sample: Option<&ShapesSample>) -> Option<Mask> {
    let (h, w) = side;
    match source {
        FixedMaskSource::None => None,
        FixedMaskSource::All => Some(Mask::filled(h, w, true)),
        FixedMaskSource::Center => {
            let values = (0..h * w)
                .map(|p| {
                    let (r, c) = (p / w, p % w);
                    (h / 4..h - h / 4).contains(&r) && (w / 4..w - w / 4).contains(&c)
                })
                .collect();
            Some(Mask::from_values(h, w, values).expect("dims"))
        }
        FixedMaskSource::GroundTruth => sample.map(ShapesSample::union_mask),
    }
}

/// Resolves the configured policy for one sample, falling back when a
/// source is unavailable.
fn mask_policy(
    config: &RunConfig,
    side: (usize, usize),
    sample: Option<&ShapesSample>,
) -> Result<MaskPolicy> {
    Ok(match config.mask_policy {
        MaskPolicyName::None => MaskPolicy::None,
        MaskPolicyName::Random => MaskPolicy::Random {
            density: config.mask_density,
        },
        MaskPolicyName::Fixed => match fixed_mask(config.fixed_mask, side, sample) {
            Some(m) => MaskPolicy::Fixed(m),
            None => {
                return Err(Error::Config(format!(
                    "fixed_mask = {:?} is unavailable for this denoiser",
                    config.fixed_mask
                )))
            }
        },
        MaskPolicyName::Dynamic => match sample {
            Some(s) => MaskPolicy::Dynamic {
                selection: TokenSelection::new(s.object_token_positions())?,
                rule: config.attention_rule,
            },
            None => match fixed_mask(config.fixed_mask, side, None) {
                Some(m) => {
                    warn!("the oracle reports no attention; dynamic masks fall back to the fixed mask");
                    MaskPolicy::Fixed(m)
                }
                None => {
                    warn!("the oracle reports no attention; dynamic masks fall back to no mask");
                    MaskPolicy::None
                }
            },
        },
    })
}

struct SampleSetup {
    denoiser: Box<dyn Denoiser>,
    shape: (usize, usize, usize),
    /// Prompt samples when conditioning on captions.
    prompts: Option<Vec<ShapesSample>>,
}

fn held_out(config: &RunConfig, count: usize) -> Result<Vec<ShapesSample>> {
    (0..count)
        .map(|k| generate_sample(config.dims, config.seed, (config.dataset_size + k) as u64))
        .collect()
}

fn sample_setup(config: &RunConfig) -> Result<SampleSetup> {
    match config.denoiser {
        DenoiserSource::Oracle => {
            let side = config.gaussian_side;
            let spec = make_gaussian_spec(side, side, config.gaussian_structure(), config.seed)?;
            Ok(SampleSetup {
                denoiser: Box::new(GaussianOracle {
                    spec,
                    schedule: config.noise()?,
                }),
                shape: (1, side, side),
                prompts: None,
            })
        }
        DenoiserSource::Checkpoint => {
            let model = Checkpoint::load(&config.checkpoint_dir)?.model()?;
            let channels = model.config.channels;
            Ok(SampleSetup {
                denoiser: Box::new(model),
                shape: (channels, config.dims, config.dims),
                prompts: Some(held_out(config, config.samples)?),
            })
        }
    }
}

fn sample_one(
    config: &RunConfig,
    setup: &SampleSetup,
    family: ScheduleFamily,
    k: usize,
    policy: MaskPolicy,
) -> Result<SampleOutput> {
    let sampler = Sampler::new(family, config.noise()?, config.sampler_config(), policy)?.with_trace(true);
    let tokens = setup.prompts.as_ref().map(|p| p[k].caption.as_slice());
    sampler.sample(setup.denoiser.as_ref(), tokens, setup.shape, k as u64)
}

pub fn cmd_sample(config: &RunConfig) -> Result<Outcome> {
    let setup = sample_setup(config)?;
    let dir = &config.out_dir;
    fs::create_dir_all(dir)?;
    let side = (setup.shape.1, setup.shape.2);
    let family = config.family()?;
    let mut outputs = Vec::new();
    for k in 0..config.samples {
        let prompt = setup.prompts.as_ref().map(|p| &p[k]);
        let policy = mask_policy(config, side, prompt)?;
        let paired = policy != MaskPolicy::None;
        let out = sample_one(config, &setup, family, k, policy)?;
        outputs.push(write_image(
            dir,
            &format!("sample_{k:03}"),
            &out.final_state,
            config.image_format,
        )?);
        if paired {
            let base = sample_one(config, &setup, family, k, MaskPolicy::None)?;
            outputs.push(write_image(
                dir,
                &format!("sample_{k:03}_nomask"),
                &base.final_state,
                config.image_format,
            )?);
        }
        let trace = format!("trace_{k:03}.csv");
        write_trace_csv(&dir.join(&trace), &out.fields, &out.masks)?;
        outputs.push(trace);
        let mask_dir = dir.join(format!("masks_{k:03}"));
        fs::create_dir_all(&mask_dir)?;
        for (i, m) in out.masks.iter().enumerate() {
            write_image(
                &mask_dir,
                &format!("step_{i:03}"),
                &mask_image(m),
                config.image_format,
            )?;
        }
        outputs.push(path_str(&mask_dir));
        if let Some(p) = prompt {
            info!("sample {k}: '{}'", p.caption_text());
        }
    }
    let mut passed = true;
    let mut report = None;
    if !config.omega_sweep.is_empty() {
        let r = residual_noise_report(config, &setup)?;
        let path = dir.join("residual_noise.json");
        r.save(&path)?;
        outputs.push(path_str(&path));
        print!("{}", r.summary());
        passed = r.passed;
        report = Some(r);
    }
    Ok(Outcome {
        passed,
        report,
        outputs,
    })
}

/// Residual Laplacian energy of ExtremeClamp samples per omega, measured over
/// the prompt's background. Without a layout prompt the region is the pixels
/// that mostly followed the fast branch. Samples without interior region
/// pixels are left out of the mean.
fn residual_noise_report(config: &RunConfig, setup: &SampleSetup) -> Result<EvalReport> {
    let side = (setup.shape.1, setup.shape.2);
    let mut metrics = Vec::new();
    for &omega in &config.omega_sweep {
        let family = ScheduleFamily::with_omega(Curve::ExtremeClamp, omega, config.steps as f64)?;
        let energies = eval::parallel_map(config.samples, config.worker_count(), |k| {
            let prompt = setup.prompts.as_ref().map(|p| &p[k]);
            let out = sample_one(config, setup, family, k, mask_policy(config, side, prompt)?)?;
            let region = match prompt {
                Some(p) => Some(p.union_mask().complement()),
                None => fast_region(&out.masks),
            };
            Ok(region.and_then(|r| laplacian_energy(&out.final_state, &r)))
        })?;
        let energies: Vec<f64> = energies.into_iter().flatten().collect();
        let mean = if energies.is_empty() {
            f64::NAN
        } else {
            energies.iter().sum::<f64>() / energies.len() as f64
        };
        metrics.push(MetricResult::info(
            &format!("residual_noise_energy@omega={omega}"),
            mean,
            energies.len(),
        ));
    }
    Ok(EvalReport::new("sample:omega-sweep", config, metrics))
}

pub fn cmd_eval_gaussian(config: &RunConfig) -> Result<Outcome> {
    let side = config.gaussian_side;
    let spec = make_gaussian_spec(side, side, config.gaussian_structure(), config.seed)?;
    let threads = config.worker_count();
    let n = config.eval_samples;
    let run = |steps: usize, synchronous: bool| -> Result<eval::MomentErrors> {
        let horizon = steps as f64;
        let noise = crate::noise::NoiseSchedule::new(config.noise_kind()?, horizon)?;
        let oracle = GaussianOracle {
            spec: spec.clone(),
            schedule: noise.clone(),
        };
        let sampler_config = crate::sampler::SamplerConfig {
            steps,
            ..config.sampler_config()
        };
        let family = ScheduleFamily::with_omega(config.family, config.omega, horizon)?;
        let policy = MaskPolicy::Random {
            density: config.mask_density,
        };
        let sampler = Sampler::new(family, noise, sampler_config, policy)?;
        let start = std::time::Instant::now();
        let samples = oracle_samples(&sampler, &oracle, n, synchronous, threads)?;
        let m = moment_errors(&samples, &spec)?;
        info!(
            "{} T={steps}: mean error {:.4}, covariance error {:.4} ({:.1?})",
            if synchronous { "sync" } else { "async" },
            m.mean_error,
            m.covariance_error,
            start.elapsed()
        );
        Ok(m)
    };
    let sync = run(config.steps, true)?;
    let asyn = run(config.steps, false)?;
    let mut metrics = vec![
        MetricResult::at_most("sync_mean_error", sync.mean_error, config.mean_tolerance, n),
        MetricResult::at_most(
            "sync_covariance_error",
            sync.covariance_error,
            config.covariance_tolerance,
            n,
        ),
        MetricResult::at_most("async_mean_error", asyn.mean_error, config.mean_tolerance, n),
        MetricResult::at_most(
            "async_covariance_error",
            asyn.covariance_error,
            config.covariance_tolerance,
            n,
        ),
    ];
    if config.trend_steps > 0 && config.trend_steps < config.steps {
        let coarse = run(config.trend_steps, true)?;
        metrics.push(MetricResult::info(
            &format!("sync_covariance_error@T={}", config.trend_steps),
            coarse.covariance_error,
            n,
        ));
        metrics.push(MetricResult::at_least(
            "discretization_trend",
            coarse.covariance_error - sync.covariance_error,
            0.0,
            n,
        ));
    }
    finish_report(config, "eval-gaussian", metrics, "eval_gaussian.json")
}

fn finish_report(
    config: &RunConfig,
    command: &str,
    metrics: Vec<MetricResult>,
    file: &str,
) -> Result<Outcome> {
    let report = EvalReport::new(command, config, metrics);
    let path = config.out_dir.join(file);
    report.save(&path)?;
    print!("{}", report.summary());
    Ok(Outcome {
        passed: report.passed,
        report: Some(report),
        outputs: vec![path_str(&path)],
    })
}

pub fn cmd_eval_mask(config: &RunConfig) -> Result<Outcome> {
    let model = Checkpoint::load(&config.checkpoint_dir)?.model()?;
    let samples = held_out(config, config.eval_images)?;
    let scores = score_masks(
        &model,
        &samples,
        &config.noise()?,
        &config.mask_eval_levels,
        config.attention_rule,
        config.baseline_draws,
        config.seed,
        config.worker_count(),
    )?;
    let n = samples.len();
    let (mean, base) = (scores.mean_iou(), scores.mean_baseline());
    let metrics = vec![
        MetricResult::info("mean_iou", mean, n),
        MetricResult::info("baseline_iou", base, n),
        MetricResult::at_least("iou_ratio", mean / base, config.iou_ratio_gate, n),
    ];
    finish_report(config, "eval-mask", metrics, "eval_mask.json")
}

pub fn cmd_schedule_trace(config: &RunConfig) -> Result<Outcome> {
    let family = config.family()?;
    let dir = &config.out_dir;
    fs::create_dir_all(dir)?;
    let paths = trace::shifted_trajectories(&family)?;
    fs::write(dir.join("curves.csv"), trace::curves_csv(&family)?)?;
    fs::write(dir.join("shifted.csv"), trace::shifted_csv(&paths))?;
    fs::write(dir.join("schedules.svg"), trace::plot_svg(&family, &paths)?)?;
    let horizon = config.steps as f64;
    let gaps = trace::gap_sweep(horizon, &OMEGA_GRID)?;
    let mut csv = String::from("omega,max_gap,omega_t_over_2\n");
    let mut worst: f64 = 0.0;
    for &(w, g) in &gaps {
        csv.push_str(&format!("{w},{g},{}\n", w * horizon / 2.0));
        worst = worst.max((g - w * horizon / 2.0).abs());
    }
    fs::write(dir.join("gap.csv"), csv)?;
    let metrics = vec![MetricResult::at_most(
        "gap_linearity_error",
        worst,
        1e-9,
        gaps.len(),
    )];
    let mut outcome = finish_report(config, "schedule-trace", metrics, "schedule_trace.json")?;
    outcome.outputs.extend(
        ["curves.csv", "shifted.csv", "schedules.svg", "gap.csv"]
            .iter()
            .map(|f| path_str(&dir.join(f))),
    );
    Ok(outcome)
}
