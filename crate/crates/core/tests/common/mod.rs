//! Reference implementations shared by the integration suites. Everything
//! here is written from the formulas directly and never calls the code it
//! is used to check.

#![allow(dead_code)]

use std::f64::consts::E;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use asyndiff::attention::AttentionLayer;
use asyndiff::data::{make_gaussian_spec, GaussianStructure};
use asyndiff::denoiser::{
    oracle_predict, GaussianDataSpec, GaussianOracle, NetConfig, NetParams, TinyCondDenoiser,
};
use asyndiff::latent::LatentState;
use asyndiff::noise::NoiseSchedule;
use asyndiff::sampler::sample_rng;
use asyndiff::schedule::{Curve, TimestepField};

pub const CONCAVE: [Curve; 4] = [
    Curve::Quadratic,
    Curve::PiecewiseLinear,
    Curve::Exponential,
    Curve::ExtremeClamp,
];

pub fn reference(curve: Curve, t: f64, i: f64) -> f64 {
    match curve {
        Curve::Linear => t - i,
        Curve::Quadratic => t - i * i / t,
        Curve::PiecewiseLinear => (t - i / 2.0).min(1.5 * t - 1.5 * i),
        Curve::Exponential => t / (E - 1.0) * (E - (i / t).exp()),
        Curve::ExtremeClamp => t.min(2.0 * t - 2.0 * i),
    }
}

pub fn reference_reweighted(curve: Curve, omega: f64, t: f64, i: f64) -> f64 {
    omega * reference(curve, t, i) + (1.0 - omega) * (t - i)
}

/// Marginal alpha-bar a step lands on; the last step targets clean data.
pub fn target_ab(s: &NoiseSchedule, t: f64, t_next: f64) -> f64 {
    if t_next <= 0.0 && t > 0.0 {
        1.0
    } else {
        s.alpha_bar(t_next)
    }
}

/// Scalar ancestral step, from the posterior formulas.
pub fn ddpm_scalar(s: &NoiseSchedule, x: f64, eps: f64, t: f64, t_next: f64, z: f64) -> f64 {
    let ab = s.alpha_bar(t);
    let ab_next = target_ab(s, t, t_next);
    let alpha = ab / ab_next;
    let beta = 1.0 - alpha;
    let mean = (x - beta / (1.0 - ab).sqrt() * eps) / alpha.sqrt();
    let var = (1.0 - ab_next) / (1.0 - ab) * beta;
    mean + var.max(0.0).sqrt() * z
}

/// Scalar DDIM step, from the x0-prediction form.
pub fn ddim_scalar(s: &NoiseSchedule, x: f64, eps: f64, t: f64, t_next: f64, eta: f64, z: f64) -> f64 {
    let ab = s.alpha_bar(t);
    let ab_next = target_ab(s, t, t_next);
    let x0 = (x - (1.0 - ab).sqrt() * eps) / ab.sqrt();
    let sigma = eta * ((1.0 - ab_next) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_next).max(0.0).sqrt();
    ab_next.sqrt() * x0 + (1.0 - ab_next - sigma * sigma).max(0.0).sqrt() * eps + sigma * z
}

pub fn smooth_oracle(side: usize, horizon: f64, seed: u64) -> GaussianOracle {
    let spec = make_gaussian_spec(
        side,
        side,
        GaussianStructure::Smooth {
            variance: 1.0,
            length_scale: 1.0,
        },
        seed,
    )
    .unwrap();
    GaussianOracle {
        spec,
        schedule: NoiseSchedule::cosine(horizon),
    }
}

pub fn random_spec<R: Rng>(h: usize, w: usize, rng: &mut R) -> GaussianDataSpec {
    let d = h * w;
    let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let cov = &b * b.transpose() / d as f64 + DMatrix::identity(d, d) * 0.2;
    let mean = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    GaussianDataSpec::new(h, w, mean, cov.transpose().as_slice().to_vec()).unwrap()
}

pub fn random_field<R: Rng>(h: usize, w: usize, horizon: f64, rng: &mut R) -> TimestepField {
    let values = (0..h * w).map(|_| rng.random_range(0.0..horizon)).collect();
    TimestepField::from_values(h, w, horizon, 0, values).unwrap()
}

/// Posterior mean of x0 via an explicit inverse.
pub fn posterior_x0(spec: &GaussianDataSpec, ab: &[f64], x: &[f64]) -> DVector<f64> {
    let d = spec.dim();
    let sigma = spec.covariance_matrix();
    let a = DMatrix::from_diagonal(&DVector::from_iterator(d, ab.iter().map(|v| v.sqrt())));
    let dm = DMatrix::from_diagonal(&DVector::from_iterator(d, ab.iter().map(|v| 1.0 - v)));
    let mu = DVector::from_column_slice(spec.mean());
    let xv = DVector::from_column_slice(x);
    let inv = (&a * &sigma * &a + dm).try_inverse().unwrap();
    &mu + &sigma * &a * inv * (xv - &a * &mu)
}

/// Worst `|sqrt(ab) x0 + sqrt(1 - ab) eps - x|` over random instances.
pub fn reconstruction_error(seed: u64) -> f64 {
    let mut rng = sample_rng(seed, 0);
    let schedule = NoiseSchedule::cosine(50.0);
    let mut worst: f64 = 0.0;
    for (h, w) in [(1, 1), (2, 2), (3, 4), (4, 4)] {
        for _ in 0..20 {
            let spec = random_spec(h, w, &mut rng);
            let field = random_field(h, w, 50.0, &mut rng);
            let x = LatentState::standard_normal(1, h, w, &mut rng);
            let eps = oracle_predict(&spec, &x, &field, &schedule).unwrap();
            let ab: Vec<f64> = field.values().iter().map(|&t| schedule.alpha_bar(t)).collect();
            let x0 = posterior_x0(&spec, &ab, x.data());
            for p in 0..h * w {
                let rebuilt = ab[p].sqrt() * x0[p] + (1.0 - ab[p]).sqrt() * eps.data()[p];
                worst = worst.max((rebuilt - x.data()[p]).abs());
            }
        }
    }
    worst
}

/// Sample mean of eps over forward draws landing in a ball around a random
/// centre, compared with the oracle at the mean accepted x (E[eps | x] is
/// affine in x, so this removes the ball's smoothing bias). Returns
/// `(|difference|, 99% half-width)` per component.
pub fn monte_carlo_check(spec: &GaussianDataSpec, field: &TimestepField, seed: u64) -> Vec<(f64, f64)> {
    let schedule = NoiseSchedule::cosine(20.0);
    let d = spec.dim();
    let ab: Vec<f64> = field.values().iter().map(|&t| schedule.alpha_bar(t)).collect();
    let chol = spec.covariance_matrix().cholesky().unwrap();
    let l = chol.l();
    let mut rng = sample_rng(seed, 0);
    let draw = |rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x0 = &l * z;
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let x = (0..d)
            .map(|p| ab[p].sqrt() * (spec.mean()[p] + x0[p]) + (1.0 - ab[p]).sqrt() * eps[p])
            .collect();
        (x, eps)
    };
    let (center, _) = draw(&mut rng);
    let radius = 0.35 * (d as f64).sqrt();
    let mut xs = vec![0.0; d];
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut n = 0usize;
    for _ in 0..3_000_000 {
        let (x, eps) = draw(&mut rng);
        let dist2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist2 > radius * radius {
            continue;
        }
        n += 1;
        for p in 0..d {
            xs[p] += x[p];
            sum[p] += eps[p];
            sq[p] += eps[p] * eps[p];
        }
        if n == 40_000 {
            break;
        }
    }
    assert!(n > 2000, "too few accepted draws ({n})");
    let nf = n as f64;
    let x_bar: Vec<f64> = xs.iter().map(|v| v / nf).collect();
    let predicted = oracle_predict(
        spec,
        &LatentState::from_vec(1, spec.height(), spec.width(), x_bar).unwrap(),
        field,
        &schedule,
    )
    .unwrap();
    (0..d)
        .map(|p| {
            let mean = sum[p] / nf;
            let var = (sq[p] / nf - mean * mean) * nf / (nf - 1.0);
            // 99% two-sided normal quantile
            let half_width = 2.576 * (var / nf).sqrt();
            ((mean - predicted.data()[p]).abs(), half_width)
        })
        .collect()
}

/// Max component mean error and relative Frobenius covariance error.
pub fn sample_moment_errors(samples: &[Vec<f64>], spec: &GaussianDataSpec) -> (f64, f64) {
    let d = spec.dim();
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    let target = spec.covariance_matrix();
    let mean_err = (0..d)
        .map(|p| (mean[p] - spec.mean()[p]).abs())
        .fold(0.0, f64::max);
    (mean_err, (cov - &target).norm() / target.norm())
}

/// Random softmax-normalized map (`n_tokens x h x w`, token-major).
pub fn softmax_map(logits: &[f64], n: usize, h: usize, w: usize) -> AttentionLayer {
    let plane = h * w;
    let mut values = vec![0.0; n * plane];
    for p in 0..plane {
        let max = (0..n)
            .map(|o| logits[o * plane + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..n).map(|o| (logits[o * plane + p] - max).exp()).sum();
        for o in 0..n {
            values[o * plane + p] = (logits[o * plane + p] - max).exp() / total;
        }
    }
    AttentionLayer::new(n, h, w, values).unwrap()
}

/// Mean-threshold mask union written with explicit loops.
pub fn brute_force_mask(map: &AttentionLayer, selected: &[usize], th: usize, tw: usize) -> Vec<bool> {
    let (_, h, w) = map.dims();
    let v = map.values();
    let mut out = vec![false; th * tw];
    for &o in selected {
        let mut sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                sum += v[o * h * w + y * w + x];
            }
        }
        let mean = sum / (h * w) as f64;
        for ty in 0..th {
            for tx in 0..tw {
                let (y, x) = (ty * h / th, tx * w / tw);
                if v[o * h * w + y * w + x] > mean {
                    out[ty * tw + tx] = true;
                }
            }
        }
    }
    out
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn gradient_config() -> NetConfig {
    NetConfig {
        channels: 3,
        features: 6,
        temb_dim: 4,
        key_dim: 5,
        attn_pool: 4,
        horizon: 20.0,
        ..NetConfig::default()
    }
}

pub struct GradProblem {
    pub x: LatentState,
    pub field: TimestepField,
    pub tokens: Vec<usize>,
    pub target: LatentState,
}

pub fn grad_problem(seed: u64) -> GradProblem {
    let mut rng = sample_rng(seed, 0);
    let (h, w) = (8, 8);
    let values = (0..h * w).map(|_| rng.random_range(0.0..20.0)).collect();
    GradProblem {
        x: LatentState::standard_normal(3, h, w, &mut rng),
        field: TimestepField::from_values(h, w, 20.0, 0, values).unwrap(),
        tokens: vec![2, 6, 4, 8, 1],
        target: LatentState::standard_normal(3, h, w, &mut rng),
    }
}

/// Relative error with a floor so that vanishing gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences on `per_block` random entries of every block plus each
/// block's largest-gradient entry; returns the worst relative error per block.
pub fn finite_difference_report(
    model: &TinyCondDenoiser,
    p: &GradProblem,
    per_block: usize,
    seed: u64,
) -> Vec<(String, f64)> {
    let mut grads = NetParams::zeros_like(&model.params);
    model
        .loss_and_grad(&p.x, &p.field, &p.tokens, &p.target, &mut grads)
        .unwrap();
    let names = model.config.block_shapes();
    let mut rng = sample_rng(seed, 1);
    let mut out = Vec::new();
    for (b, (name, _)) in names.iter().enumerate() {
        let n = model.params.blocks[b].len();
        let mut idx: Vec<usize> = (0..per_block).map(|_| rng.random_range(0..n)).collect();
        let largest = (0..n)
            .max_by(|&i, &j| grads.blocks[b][i].abs().total_cmp(&grads.blocks[b][j].abs()))
            .unwrap();
        idx.push(largest);
        let mut worst: f64 = 0.0;
        for k in idx {
            let mut plus = model.clone();
            plus.params.blocks[b][k] += FD_STEP;
            let mut minus = model.clone();
            minus.params.blocks[b][k] -= FD_STEP;
            let lp = plus.loss(&p.x, &p.field, &p.tokens, &p.target).unwrap();
            let lm = minus.loss(&p.x, &p.field, &p.tokens, &p.target).unwrap();
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads.blocks[b][k], numeric));
        }
        out.push((name.to_string(), worst));
    }
    out
}
