use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{
    aggregate_layers, extract_mask, iou, CrossAttentionMaps, LayerRule, Mask, TokenSelection,
};
use crate::data::ShapesSample;
use crate::denoiser::{GaussianDataSpec, GaussianOracle, TinyCondDenoiser};
use crate::error::{Error, Result};
use crate::latent::LatentState;
use crate::noise::NoiseSchedule;
use crate::sampler::{sample_rng, Sampler};
use crate::schedule::TimestepField;

/// Maps `f` over `0..n` on up to `threads` scoped workers, keeping index order.
pub fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let range = (w * chunk).min(n)..((w + 1) * chunk).min(n);
                s.spawn(move || range.map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Moment errors of a sample set against a Gaussian target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentErrors {
    /// `max_k |mean_hat_k - mean_k|`.
    pub mean_error: f64,
    /// `||Sigma_hat - Sigma||_F / ||Sigma||_F`.
    pub covariance_error: f64,
    pub count: usize,
}

pub fn moment_errors(samples: &[Vec<f64>], spec: &GaussianDataSpec) -> Result<MomentErrors> {
    let d = spec.dim();
    let n = samples.len();
    if n < 2 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::InvalidArgument(format!(
            "need at least two samples of dimension {d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (s[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let mean_error = mean
        .iter()
        .zip(spec.mean())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let diff: f64 = cov
        .iter()
        .zip(spec.covariance())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let norm: f64 = spec.covariance().iter().map(|v| v * v).sum();
    Ok(MomentErrors {
        mean_error,
        covariance_error: (diff / norm).sqrt(),
        count: n,
    })
}

/// Draws `n` samples with the oracle denoiser; sample `k` uses stream `k`.
pub fn oracle_samples(
    sampler: &Sampler,
    oracle: &GaussianOracle,
    n: usize,
    synchronous: bool,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let shape = (1, oracle.spec.height(), oracle.spec.width());
    parallel_map(n, threads, |k| {
        let out = if synchronous {
            sampler.sample_synchronous(oracle, None, shape, k as u64)?
        } else {
            sampler.sample(oracle, None, shape, k as u64)?
        };
        Ok(out.final_state.into_vec())
    })
}

/// Noises `image` to the uniform timestep `t`.
pub fn noise_to<R: Rng>(image: &LatentState, schedule: &NoiseSchedule, t: f64, rng: &mut R) -> LatentState {
    let ab = schedule.alpha_bar(t);
    let (c, h, w) = image.shape();
    let data = image
        .data()
        .iter()
        .map(|&x0| ab.sqrt() * x0 + (1.0 - ab).sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    LatentState::from_vec(c, h, w, data).expect("shape")
}

/// Extracted mask of one image, with attention averaged over noise levels.
pub fn extracted_mask(
    model: &TinyCondDenoiser,
    sample: &ShapesSample,
    schedule: &NoiseSchedule,
    levels: &[f64],
    rule: LayerRule,
    seed: u64,
    stream: u64,
) -> Result<Mask> {
    let mut rng = sample_rng(seed, stream);
    let image = sample.latent();
    let (h, w) = (sample.height, sample.width);
    let horizon = schedule.horizon();
    let captures = levels
        .iter()
        .map(|&level| {
            let t = level * horizon;
            let x = noise_to(&image, schedule, t, &mut rng);
            let field = TimestepField::uniform(h, w, horizon, 0, t);
            let (_, layer) = model.predict_with_maps(&x, &field, &sample.caption)?;
            Ok(CrossAttentionMaps::new(vec![layer]))
        })
        .collect::<Result<Vec<_>>>()?;
    let maps = CrossAttentionMaps::mean(&captures)?;
    let agg = aggregate_layers(&maps, (h, w), rule)?;
    let selection = TokenSelection::new(sample.object_token_positions())?;
    extract_mask(&agg, &selection, (h, w))
}

/// Mean IoU of a uniformly random mask with the same area as `mask`.
pub fn area_matched_baseline<R: Rng>(
    mask: &Mask,
    reference: &Mask,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = mask.height() * mask.width();
    let area = mask.area();
    let mut total = 0.0;
    for _ in 0..draws.max(1) {
        let mut values = vec![false; n];
        for k in sample_indices(rng, n, area) {
            values[k] = true;
        }
        total += iou(
            &Mask::from_values(mask.height(), mask.width(), values)?,
            reference,
        )?;
    }
    Ok(total / draws.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskScores {
    pub ious: Vec<f64>,
    pub baselines: Vec<f64>,
}

impl MaskScores {
    pub fn mean_iou(&self) -> f64 {
        self.ious.iter().sum::<f64>() / self.ious.len() as f64
    }

    pub fn mean_baseline(&self) -> f64 {
        self.baselines.iter().sum::<f64>() / self.baselines.len() as f64
    }
}

/// Extracted-mask IoU against ground truth and its area-matched random baseline.
#[allow(clippy::too_many_arguments)]
pub fn score_masks(
    model: &TinyCondDenoiser,
    samples: &[ShapesSample],
    schedule: &NoiseSchedule,
    levels: &[f64],
    rule: LayerRule,
    baseline_draws: usize,
    seed: u64,
    threads: usize,
) -> Result<MaskScores> {
    if samples.is_empty() || levels.is_empty() {
        return Err(Error::InvalidArgument(
            "mask scoring needs images and noise levels".into(),
        ));
    }
    let pairs = parallel_map(samples.len(), threads, |k| {
        let sample = &samples[k];
        let truth = sample.union_mask();
        let mask = extracted_mask(model, sample, schedule, levels, rule, seed, k as u64)?;
        let mut rng = sample_rng(seed ^ 0x6261_7365, k as u64);
        Ok((
            iou(&mask, &truth)?,
            area_matched_baseline(&mask, &truth, baseline_draws, &mut rng)?,
        ))
    })?;
    let (ious, baselines) = pairs.into_iter().unzip();
    Ok(MaskScores { ious, baselines })
}

/// Mean squared 4-neighbour Laplacian over interior pixels of `region`, all
/// channels; `None` when the region has no interior pixels.
pub fn laplacian_energy(image: &LatentState, region: &Mask) -> Option<f64> {
    let (c, h, w) = image.shape();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let p = image.channel(ch);
        for r in 1..h.saturating_sub(1) {
            for col in 1..w.saturating_sub(1) {
                if !region.get(r, col) {
                    continue;
                }
                let v = p[r * w + col];
                let lap =
                    p[(r - 1) * w + col] + p[(r + 1) * w + col] + p[r * w + col - 1] + p[r * w + col + 1]
                        - 4.0 * v;
                total += lap * lap;
                count += 1;
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Pixels masked in fewer than half of the transitions, i.e. those that
/// mostly followed the fast linear branch.
pub fn fast_region(masks: &[Mask]) -> Option<Mask> {
    let first = masks.first()?;
    let mut counts = vec![0usize; first.values().len()];
    for m in masks {
        for (c, &v) in counts.iter_mut().zip(m.values()) {
            *c += usize::from(v);
        }
    }
    let values = counts.iter().map(|&c| 2 * c < masks.len()).collect();
    Mask::from_values(first.height(), first.width(), values).ok()
}
