use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingMetadata};
use super::net::{NetParams, TinyCondDenoiser, NULL_TOKEN};
use crate::error::{Error, Result};
use crate::latent::LatentState;
use crate::noise::NoiseSchedule;
use crate::sampler::sample_rng;
use crate::schedule::TimestepField;

/// One clean training image with its caption.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: LatentState,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Probability of replacing the caption by the null token.
    pub cond_dropout: f64,
    pub seed: u64,
    /// Draw an independent timestep per pixel instead of one per image.
    pub per_pixel_timesteps: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            clip_norm: 1.0,
            cond_dropout: 0.1,
            seed: 0,
            per_pixel_timesteps: false,
            log_every: 100,
        }
    }
}

/// Draws `(x_t, t, eps)` for one example.
fn noised<R: Rng>(
    example: &TrainingExample,
    schedule: &NoiseSchedule,
    per_pixel: bool,
    rng: &mut R,
) -> (LatentState, TimestepField, LatentState) {
    let img = &example.image;
    let (c, h, w) = img.shape();
    let horizon = schedule.horizon();
    let field = if per_pixel {
        let values = (0..h * w).map(|_| rng.random::<f64>() * horizon).collect();
        TimestepField::from_values(h, w, horizon, 0, values).expect("timesteps within horizon")
    } else {
        TimestepField::uniform(h, w, horizon, 0, rng.random::<f64>() * horizon)
    };
    let eps = LatentState::standard_normal(c, h, w, rng);
    let plane = h * w;
    let data = img
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(k, (&x0, &e))| {
            let ab = schedule.alpha_bar(field.values()[k % plane]);
            ab.sqrt() * x0 + (1.0 - ab).sqrt() * e
        })
        .collect();
    (LatentState::from_vec(c, h, w, data).expect("shape"), field, eps)
}

/// Minimizes the epsilon-prediction objective with momentum SGD.
pub fn train(
    mut model: TinyCondDenoiser,
    examples: &[TrainingExample],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    dataset_fingerprint: &str,
) -> Result<Checkpoint> {
    if config.steps > 0 && examples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let mut rng = sample_rng(config.seed, 0x74_7261_696e);
    let mut velocity = NetParams::zeros_like(&model.params);
    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut initial = None;
    for step in 0..config.steps {
        let mut grads = NetParams::zeros_like(&model.params);
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            let example = &examples[rng.random_range(0..examples.len())];
            let (x, field, eps) = noised(example, schedule, config.per_pixel_timesteps, &mut rng);
            let tokens: &[usize] = if rng.random::<f64>() < config.cond_dropout {
                &[NULL_TOKEN]
            } else {
                &example.tokens
            };
            batch_loss += model.loss_and_grad(&x, &field, tokens, &eps, &mut grads)?;
        }
        let scale = 1.0 / config.batch_size as f64;
        batch_loss *= scale;
        grads.scale(scale);
        if !batch_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: batch_loss,
                initial: initial.unwrap_or(f64::NAN),
            });
        }
        let initial_loss = *initial.get_or_insert(batch_loss);
        if batch_loss > 10.0 * initial_loss {
            return Err(Error::Diverged {
                step,
                loss: batch_loss,
                initial: initial_loss,
            });
        }
        let norm = grads.norm();
        if norm > config.clip_norm {
            grads.scale(config.clip_norm / norm);
        }
        velocity.scale(config.momentum);
        velocity.add_assign(&grads);
        for (p, v) in model.params.blocks.iter_mut().zip(&velocity.blocks) {
            for (w, dv) in p.iter_mut().zip(v) {
                *w -= config.learning_rate * dv;
            }
        }
        loss_curve.push(batch_loss);
        if config.log_every > 0 && (step + 1) % config.log_every == 0 {
            let window = &loss_curve[loss_curve.len().saturating_sub(config.log_every)..];
            info!(
                "step {:>6}/{}: mean loss {:.5} (grad norm {:.3})",
                step + 1,
                config.steps,
                window.iter().sum::<f64>() / window.len() as f64,
                norm
            );
        }
    }
    Ok(Checkpoint {
        config: model.config,
        params: model.params,
        metadata: TrainingMetadata {
            steps: config.steps,
            loss_curve,
            seed: config.seed,
            dataset_fingerprint: dataset_fingerprint.to_string(),
            train_config: config.clone(),
        },
    })
}

/// Mean epsilon-prediction loss over `draws` noisings of every example.
pub fn evaluate_loss(
    model: &TinyCondDenoiser,
    examples: &[TrainingExample],
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = sample_rng(seed, 0x6576_616c);
    let mut total = 0.0;
    let mut count = 0usize;
    for example in examples {
        for _ in 0..draws {
            let (x, field, eps) = noised(example, schedule, false, &mut rng);
            total += model.loss(&x, &field, &example.tokens, &eps)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no examples to evaluate".into()));
    }
    Ok(total / count as f64)
}
