use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use asyndiff::attention::{LayerRule, Mask, TokenSelection};
use asyndiff::denoiser::{Denoiser, Prediction};
use asyndiff::latent::LatentState;
use asyndiff::noise::NoiseSchedule;
use asyndiff::sampler::{ddim_step, ddpm_step, sample_rng};
use asyndiff::schedule::{Curve, ScheduleFamily, TimestepField};
use asyndiff::{MaskPolicy, Result, Sampler, SamplerConfig, SamplerKind};

mod common;
use common::{ddim_scalar, ddpm_scalar, smooth_oracle};

fn oracle(side: usize, horizon: f64) -> asyndiff::denoiser::GaussianOracle {
    smooth_oracle(side, horizon, 5)
}

fn random_latent<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> LatentState {
    LatentState::standard_normal(c, h, w, rng)
}

#[test]
fn constant_field_steps_match_scalar_oracles() {
    let horizon = 50.0;
    let mut worst: f64 = 0.0;
    for noise in [
        NoiseSchedule::cosine(horizon),
        NoiseSchedule::new("linear-beta".parse().unwrap(), horizon).unwrap(),
    ] {
        let mut rng = sample_rng(2024, 0);
        for case in 0..100 {
            let t: f64 = rng.random_range(0.5..=horizon);
            let t_next = match case % 4 {
                0 => 0.0,
                1 => t,
                _ => rng.random_range(0.0..t),
            };
            let eta = [0.0, 0.5, 1.0][case % 3];
            let x = random_latent(&mut rng, 3, 4, 5);
            let eps = random_latent(&mut rng, 3, 4, 5);
            let field = TimestepField::uniform(4, 5, horizon, 0, t);
            let next = TimestepField::uniform(4, 5, horizon, 1, t_next);
            let seed = rng.random::<u64>();
            let z: Vec<f64> = {
                let mut r = sample_rng(seed, 1);
                (0..60).map(|_| r.sample(StandardNormal)).collect()
            };
            let ddpm = ddpm_step(&x, &field, &next, &eps, &noise, &mut sample_rng(seed, 1)).unwrap();
            let ddim = ddim_step(&x, &field, &next, &eps, eta, &noise, &mut sample_rng(seed, 1)).unwrap();
            for (k, &zk) in z.iter().enumerate() {
                let (xv, ev) = (x.data()[k], eps.data()[k]);
                let a = ddpm_scalar(&noise, xv, ev, t, t_next, zk);
                let b = ddim_scalar(&noise, xv, ev, t, t_next, eta, zk);
                worst = worst
                    .max((ddpm.data()[k] - a).abs())
                    .max((ddim.data()[k] - b).abs());
            }
        }
    }
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

#[test]
fn heterogeneous_step_is_per_pixel_scalar_step() {
    let noise = NoiseSchedule::cosine(50.0);
    let mut rng = sample_rng(9, 0);
    let ts: Vec<f64> = (0..6).map(|_| rng.random_range(1.0..50.0)).collect();
    let tn: Vec<f64> = ts.iter().map(|&t| t * rng.random::<f64>()).collect();
    let field = TimestepField::from_values(2, 3, 50.0, 0, ts.clone()).unwrap();
    let next = TimestepField::from_values(2, 3, 50.0, 1, tn.clone()).unwrap();
    let x = random_latent(&mut rng, 2, 2, 3);
    let eps = random_latent(&mut rng, 2, 2, 3);
    let z: Vec<f64> = {
        let mut r = sample_rng(3, 3);
        (0..12).map(|_| r.sample(StandardNormal)).collect()
    };
    let out = ddim_step(&x, &field, &next, &eps, 0.7, &noise, &mut sample_rng(3, 3)).unwrap();
    for (k, &zk) in z.iter().enumerate() {
        let p = k % 6;
        let expected = ddim_scalar(&noise, x.data()[k], eps.data()[k], ts[p], tn[p], 0.7, zk);
        assert!((out.data()[k] - expected).abs() <= 1e-12);
    }
}

#[test]
fn ddim_variance_shrinks_with_exact_eps() {
    // unit-variance data keeps unit marginal variance, so E[eps | x] = sqrt(1 - ab) x
    let noise = NoiseSchedule::cosine(50.0);
    let mut rng = sample_rng(77, 0);
    for _ in 0..200 {
        let t: f64 = rng.random_range(0.1..50.0);
        let t_next = if rng.random::<f64>() < 0.1 {
            t
        } else {
            rng.random_range(0.0..t)
        };
        let x = LatentState::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let eps = LatentState::from_vec(1, 1, 1, vec![(1.0 - noise.alpha_bar(t)).sqrt()]).unwrap();
        let field = TimestepField::uniform(1, 1, 50.0, 0, t);
        let next = TimestepField::uniform(1, 1, 50.0, 1, t_next);
        let out = ddim_step(&x, &field, &next, &eps, 0.0, &noise, &mut rng).unwrap();
        let factor = out.data()[0] * out.data()[0];
        assert!(factor <= 1.0 + 1e-12, "variance grew: {factor}");
        if t_next == t {
            assert!((factor - 1.0).abs() < 1e-12);
        } else {
            assert!(factor < 1.0);
        }
    }
}

fn sampler(kind: SamplerKind, eta: f64, steps: usize, policy: MaskPolicy) -> Sampler {
    let horizon = steps as f64;
    Sampler::new(
        ScheduleFamily::quadratic(horizon).unwrap(),
        NoiseSchedule::cosine(horizon),
        SamplerConfig {
            kind,
            eta,
            guidance_scale: 1.0,
            steps,
            seed: 42,
            ..SamplerConfig::default()
        },
        policy,
    )
    .unwrap()
}

#[test]
fn no_mask_trajectory_equals_synchronous_sampler() {
    let o = oracle(3, 20.0);
    for (kind, eta) in [
        (SamplerKind::Ddpm, 0.0),
        (SamplerKind::Ddim, 1.0),
        (SamplerKind::Ddim, 0.0),
    ] {
        let s = sampler(kind, eta, 20, MaskPolicy::None).with_trace(true);
        for stream in 0..5 {
            let a = s.sample(&o, None, (1, 3, 3), stream).unwrap();
            let b = s.sample_synchronous(&o, None, (1, 3, 3), stream).unwrap();
            assert_eq!(a.final_state, b.final_state);
            assert_eq!(a.fields, b.fields);
        }
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let o = oracle(3, 20.0);
    let s = sampler(SamplerKind::Ddim, 1.0, 20, MaskPolicy::Random { density: 0.5 }).with_trace(true);
    let a = s.sample(&o, None, (1, 3, 3), 4).unwrap();
    let b = s.sample(&o, None, (1, 3, 3), 4).unwrap();
    assert_eq!(a.final_state, b.final_state);
    assert_eq!(a.masks, b.masks);
    let c = s.sample(&o, None, (1, 3, 3), 5).unwrap();
    assert_ne!(a.final_state, c.final_state);
}

#[test]
fn deterministic_ddim_ignores_the_step_rng() {
    let o = oracle(3, 20.0);
    let s = sampler(
        SamplerKind::Ddim,
        0.0,
        20,
        MaskPolicy::Fixed(Mask::filled(3, 3, true)),
    );
    let x = random_latent(&mut sample_rng(1, 1), 1, 3, 3);
    let a = s.run(&o, None, x.clone(), &mut sample_rng(10, 0), 0).unwrap();
    let b = s.run(&o, None, x, &mut sample_rng(99, 7), 0).unwrap();
    assert_eq!(a.final_state, b.final_state);
}

#[test]
fn all_ones_fixed_mask_traces_the_schedule() {
    let o = oracle(2, 30.0);
    let s = sampler(
        SamplerKind::Ddim,
        1.0,
        30,
        MaskPolicy::Fixed(Mask::filled(2, 2, true)),
    )
    .with_trace(true);
    let out = s.sample(&o, None, (1, 2, 2), 0).unwrap();
    let f = ScheduleFamily::quadratic(30.0).unwrap();
    assert_eq!(out.fields.len(), 31);
    for (i, field) in out.fields.iter().enumerate() {
        for &t in field.values() {
            assert!((t - f.eval(i as f64).unwrap()).abs() <= 1e-9);
        }
    }
}

#[test]
fn random_masks_keep_band_and_terminate() {
    let o = oracle(3, 50.0);
    for curve in [Curve::Quadratic, Curve::ExtremeClamp, Curve::Exponential] {
        let f = ScheduleFamily::new(curve, 50.0).unwrap();
        let s = Sampler::new(
            f,
            NoiseSchedule::cosine(50.0),
            SamplerConfig {
                guidance_scale: 1.0,
                ..SamplerConfig::default()
            },
            MaskPolicy::Random { density: 0.5 },
        )
        .unwrap()
        .with_trace(true);
        for stream in 0..10 {
            let out = s.sample(&o, None, (1, 3, 3), stream).unwrap();
            for (i, field) in out.fields.iter().enumerate() {
                let (lo, hi) = (50.0 - i as f64, f.eval(i as f64).unwrap());
                assert!(field.values().iter().all(|&t| t >= lo - 1e-9 && t <= hi + 1e-9));
            }
            assert!(out.fields[50].values().iter().all(|&t| t.abs() <= 1e-9));
        }
    }
}

/// Counts calls and records whether each was conditional.
struct Counting {
    cond: AtomicUsize,
    uncond: AtomicUsize,
}

impl Denoiser for Counting {
    fn predict(
        &self,
        x: &LatentState,
        _field: &TimestepField,
        tokens: Option<&[usize]>,
    ) -> Result<Prediction> {
        match tokens {
            Some(_) => self.cond.fetch_add(1, Ordering::Relaxed),
            None => self.uncond.fetch_add(1, Ordering::Relaxed),
        };
        Ok(Prediction {
            eps: LatentState::zeros(x.channels(), x.height(), x.width()),
            maps: None,
        })
    }
}

#[test]
fn guidance_doubles_the_model_calls() {
    let counting = Counting {
        cond: AtomicUsize::new(0),
        uncond: AtomicUsize::new(0),
    };
    let mut s = sampler(SamplerKind::Ddim, 1.0, 10, MaskPolicy::None);
    s.config.guidance_scale = 5.0;
    s.sample(&counting, Some(&[2, 6]), (1, 2, 2), 0).unwrap();
    assert_eq!(counting.cond.load(Ordering::Relaxed), 10);
    assert_eq!(counting.uncond.load(Ordering::Relaxed), 10);
    s.config.guidance_scale = 1.0;
    s.sample(&counting, Some(&[2, 6]), (1, 2, 2), 0).unwrap();
    assert_eq!(counting.cond.load(Ordering::Relaxed), 20);
    assert_eq!(counting.uncond.load(Ordering::Relaxed), 10);
}

#[test]
fn dynamic_policy_needs_attention() {
    let o = oracle(2, 10.0);
    let s = sampler(
        SamplerKind::Ddim,
        1.0,
        10,
        MaskPolicy::Dynamic {
            selection: TokenSelection::new(vec![0]).unwrap(),
            rule: LayerRule::QuarterResolution,
        },
    );
    assert!(s.sample(&o, None, (1, 2, 2), 0).is_err());
}

#[test]
fn horizon_must_match_steps() {
    let r = Sampler::new(
        ScheduleFamily::quadratic(40.0).unwrap(),
        NoiseSchedule::cosine(50.0),
        SamplerConfig::default(),
        MaskPolicy::None,
    );
    assert!(r.is_err());
}
