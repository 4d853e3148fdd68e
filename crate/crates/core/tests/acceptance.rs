//! Acceptance run: one PASS/FAIL line per primary criterion, nonzero exit on
//! any failure. Tolerances are pinned here, not read from config.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use asyndiff::attention::{extract_mask, TokenSelection};
use asyndiff::denoiser::{TinyCondDenoiser, PARAM_BLOCKS};
use asyndiff::harness::eval::oracle_samples;
use asyndiff::harness::{self, Command, MaskPolicyName, RunConfig};
use asyndiff::latent::LatentState;
use asyndiff::noise::NoiseSchedule;
use asyndiff::sampler::{ddim_step, ddpm_step, sample_rng};
use asyndiff::schedule::{max_timestep_gap, solve_shift, Curve, ScheduleFamily, TimestepField};
use asyndiff::{MaskPolicy, Sampler, SamplerConfig, SamplerKind};

mod common;
use common::{
    brute_force_mask, ddim_scalar, ddpm_scalar, finite_difference_report, grad_problem, gradient_config,
    monte_carlo_check, random_field, random_spec, reconstruction_error, reference, reference_reweighted,
    sample_moment_errors, smooth_oracle, softmax_map, CONCAVE, FD_REL_TOL,
};

struct Verdict {
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

fn timed(name: &'static str, budget: Duration, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (passed, detail) = f();
    let elapsed = start.elapsed();
    Verdict {
        name,
        passed: passed && elapsed <= budget,
        detail,
        elapsed,
        budget,
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn shift_solver() -> (bool, String) {
    let mut rng = sample_rng(1, 0);
    let mut worst_residual: f64 = 0.0;
    let mut worst_closed: f64 = 0.0;
    let mut in_range = true;
    for case in 0..1000 {
        let curve = CONCAVE[case % 4];
        let horizon: f64 = rng.random_range(5.0..200.0);
        let omega = if case % 3 == 0 {
            1.0
        } else {
            rng.random_range(0.05..0.95)
        };
        let fam = ScheduleFamily::with_omega(curve, omega, horizon).unwrap();
        let f = |i: f64| reference_reweighted(curve, omega, horizon, i);
        let i0 = rng.random_range(0.01..0.99) * horizon;
        let t0 = (horizon - i0) + rng.random::<f64>() * (f(i0) - (horizon - i0));
        let s = solve_shift(&fam, i0, t0).unwrap();
        in_range &= (0.0..=i0).contains(&s.a);
        worst_residual = worst_residual
            .max((f(i0 - s.a) + s.b - t0).abs())
            .max((f(horizon - s.a) + s.b).abs());
        if curve == Curve::Quadratic && omega == 1.0 {
            let a = ((horizon + i0) / 2.0 - horizon * t0 / (2.0 * (horizon - i0))).max(0.0);
            worst_closed = worst_closed.max((s.a - a).abs());
        }
    }
    (
        in_range && worst_residual <= 1e-9 && worst_closed <= 1e-9,
        format!(
            "1000 cases, max residual {worst_residual:.1e} (tol 1e-9), quadratic closed form {worst_closed:.1e} (tol 1e-9), a in [0, i0]: {in_range}"
        ),
    )
}

fn synchronous_reduction() -> (bool, String) {
    let horizon = 50.0;
    let mut worst: f64 = 0.0;
    for noise in [
        NoiseSchedule::cosine(horizon),
        NoiseSchedule::new("linear-beta".parse().unwrap(), horizon).unwrap(),
    ] {
        let mut rng = sample_rng(2, 0);
        for case in 0..100 {
            let t: f64 = rng.random_range(0.5..=horizon);
            let t_next = if case % 5 == 0 {
                0.0
            } else {
                rng.random_range(0.0..t)
            };
            let eta = [0.0, 0.5, 1.0][case % 3];
            let x = LatentState::standard_normal(3, 4, 4, &mut rng);
            let eps = LatentState::standard_normal(3, 4, 4, &mut rng);
            let field = TimestepField::uniform(4, 4, horizon, 0, t);
            let next = TimestepField::uniform(4, 4, horizon, 1, t_next);
            let seed = rng.random::<u64>();
            let mut zr = sample_rng(seed, 1);
            let z: Vec<f64> = (0..48).map(|_| zr.sample(StandardNormal)).collect();
            let ddpm = ddpm_step(&x, &field, &next, &eps, &noise, &mut sample_rng(seed, 1)).unwrap();
            let ddim = ddim_step(&x, &field, &next, &eps, eta, &noise, &mut sample_rng(seed, 1)).unwrap();
            for (k, &zk) in z.iter().enumerate() {
                let (xv, ev) = (x.data()[k], eps.data()[k]);
                worst = worst
                    .max((ddpm.data()[k] - ddpm_scalar(&noise, xv, ev, t, t_next, zk)).abs())
                    .max((ddim.data()[k] - ddim_scalar(&noise, xv, ev, t, t_next, eta, zk)).abs());
            }
        }
    }
    let oracle = smooth_oracle(3, 30.0, 5);
    let mut identical = true;
    for (kind, eta) in [
        (SamplerKind::Ddpm, 0.0),
        (SamplerKind::Ddim, 1.0),
        (SamplerKind::Ddim, 0.0),
    ] {
        let sampler = Sampler::new(
            ScheduleFamily::quadratic(30.0).unwrap(),
            NoiseSchedule::cosine(30.0),
            SamplerConfig {
                kind,
                eta,
                steps: 30,
                guidance_scale: 1.0,
                ..SamplerConfig::default()
            },
            MaskPolicy::None,
        )
        .unwrap();
        for stream in 0..10 {
            let a = sampler.sample(&oracle, None, (1, 3, 3), stream).unwrap();
            let b = sampler
                .sample_synchronous(&oracle, None, (1, 3, 3), stream)
                .unwrap();
            identical &= a.final_state == b.final_state;
        }
    }
    (
        worst <= 1e-12 && identical,
        format!("max step deviation {worst:.1e} (tol 1e-12) over 100 states x 2 schedules, no-mask trajectories bit-identical: {identical}"),
    )
}

fn termination_band() -> (bool, String) {
    let horizon = 50.0;
    let oracle = smooth_oracle(3, horizon, 6);
    let mut worst: f64 = 0.0;
    let mut worst_end: f64 = 0.0;
    for run in 0..100u64 {
        let curve = CONCAVE[run as usize % 4];
        let sampler = Sampler::new(
            ScheduleFamily::new(curve, horizon).unwrap(),
            NoiseSchedule::cosine(horizon),
            SamplerConfig {
                steps: 50,
                guidance_scale: 1.0,
                seed: run,
                ..SamplerConfig::default()
            },
            MaskPolicy::Random { density: 0.5 },
        )
        .unwrap()
        .with_trace(true);
        let out = sampler.sample(&oracle, None, (1, 3, 3), run).unwrap();
        for (i, field) in out.fields.iter().enumerate() {
            let (lo, hi) = (horizon - i as f64, reference(curve, horizon, i as f64));
            for &t in field.values() {
                worst = worst.max(lo - t).max(t - hi);
            }
        }
        worst_end = out.fields[50]
            .values()
            .iter()
            .fold(worst_end, |m, t| m.max(t.abs()));
    }
    (
        worst <= 1e-9 && worst_end <= 1e-9,
        format!(
            "100 runs, max band violation {worst:.1e} (tol 1e-9), max |t| at i=T {worst_end:.1e} (tol 1e-9)"
        ),
    )
}

fn gaussian_end_to_end() -> (bool, String) {
    let (steps, n) = (200usize, 20_000usize);
    let horizon = steps as f64;
    let oracle = smooth_oracle(4, horizon, 0);
    let sampler = Sampler::new(
        ScheduleFamily::quadratic(horizon).unwrap(),
        NoiseSchedule::cosine(horizon),
        SamplerConfig {
            kind: SamplerKind::Ddim,
            eta: 0.0,
            steps,
            guidance_scale: 1.0,
            ..SamplerConfig::default()
        },
        MaskPolicy::Random { density: 0.5 },
    )
    .unwrap();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let sync = oracle_samples(&sampler, &oracle, n, true, threads).unwrap();
    let (sm, sc) = sample_moment_errors(&sync, &oracle.spec);
    let asyn = oracle_samples(&sampler, &oracle, n, false, threads).unwrap();
    let (am, ac) = sample_moment_errors(&asyn, &oracle.spec);
    (
        sm <= 0.05 && sc <= 0.10 && am <= 0.05 && ac <= 0.10,
        format!(
            "d=16, N={n}, T={steps}: sync mean {sm:.4} cov {sc:.4}, async mean {am:.4} cov {ac:.4} (tol 0.05 / 0.10)"
        ),
    )
}

fn oracle_correctness() -> (bool, String) {
    let reconstruction = reconstruction_error(11);
    let mut rng = sample_rng(12, 0);
    let mut inside = 0;
    let mut total = 0;
    let mut worst_ratio: f64 = 0.0;
    for (h, w, seed) in [(1, 1, 1u64), (1, 2, 2), (2, 2, 3)] {
        let spec = random_spec(h, w, &mut rng);
        let field = random_field(h, w, 20.0, &mut rng);
        for (err, half) in monte_carlo_check(&spec, &field, seed) {
            total += 1;
            inside += usize::from(err <= half);
            worst_ratio = worst_ratio.max(err / half);
        }
    }
    (
        reconstruction <= 1e-9 && inside == total,
        format!(
            "reconstruction {reconstruction:.1e} (tol 1e-9), {inside}/{total} Monte-Carlo components inside the 99% interval (worst |diff|/half-width {worst_ratio:.2})"
        ),
    )
}

fn gradient_suite() -> (bool, String) {
    let model = TinyCondDenoiser::new(gradient_config(), 3).unwrap();
    let mut report = finite_difference_report(&model, &grad_problem(4), 5, 5);
    let mut perturbed = TinyCondDenoiser::new(gradient_config(), 8).unwrap();
    let mut rng = sample_rng(8, 2);
    for block in &mut perturbed.params.blocks {
        block
            .iter_mut()
            .for_each(|v| *v += 0.3 * (rng.random::<f64>() - 0.5));
    }
    report.extend(finite_difference_report(&perturbed, &grad_problem(9), 4, 10));
    let (name, worst) = report.iter().max_by(|a, b| a.1.total_cmp(&b.1)).cloned().unwrap();
    let blocks = report.len() / 2;
    (
        blocks == PARAM_BLOCKS && worst <= FD_REL_TOL,
        format!("{blocks} blocks x 2 parameter sets, worst relative error {worst:.1e} in {name} (tol 1e-4)"),
    )
}

fn brute_force_equivalence() -> (usize, usize) {
    let mut rng = sample_rng(13, 0);
    let mut matched = 0;
    for _ in 0..1000 {
        let (n, h, w, up) = (
            rng.random_range(1..6),
            rng.random_range(1..7),
            rng.random_range(1..7),
            rng.random_range(1..4),
        );
        let logits: Vec<f64> = (0..n * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        let map = softmax_map(&logits, n, h, w);
        let mut selected: Vec<usize> = (0..n).filter(|_| rng.random::<bool>()).collect();
        if selected.is_empty() {
            selected.push(rng.random_range(0..n));
        }
        let mask = extract_mask(
            &map,
            &TokenSelection::new(selected.clone()).unwrap(),
            (h * up, w * up),
        )
        .unwrap();
        matched += usize::from(mask.values() == brute_force_mask(&map, &selected, h * up, w * up).as_slice());
    }
    (matched, 1000)
}

/// The default run configuration, redirected into a scratch directory.
fn pipeline_config(root: &std::path::Path) -> RunConfig {
    RunConfig {
        out_dir: root.join("run"),
        data_dir: root.join("data"),
        checkpoint_dir: root.join("checkpoint"),
        log_every: 0,
        ..RunConfig::default()
    }
}

fn mask_extraction(config: &RunConfig) -> (bool, String) {
    let (matched, total) = brute_force_equivalence();
    let result = harness::run(Command::GenData, config)
        .and_then(|_| harness::run(Command::Train, config))
        .and_then(|_| harness::run(Command::EvalMask, config));
    let outcome = match result {
        Ok(o) => o,
        Err(e) => return (false, format!("pipeline error: {e}")),
    };
    let report = outcome.report.expect("eval-mask report");
    let value = |m: &str| report.metric(m).map_or(f64::NAN, |r| r.value);
    let (iou, base, ratio) = (value("mean_iou"), value("baseline_iou"), value("iou_ratio"));
    (
        matched == total && ratio >= 1.5,
        format!(
            "brute force {matched}/{total} exact; trained {0}x{0}: mean IoU {iou:.3} vs area-matched baseline {base:.3}, ratio {ratio:.2} over {1} held-out images (gate 1.5)",
            config.dims, config.eval_images
        ),
    )
}

fn timestep_gap(config: &RunConfig) -> (bool, String) {
    let mut worst: f64 = 0.0;
    for horizon in [10.0, 50.0, 200.0] {
        for k in 1..=9 {
            let omega = k as f64 / 10.0;
            let fam = ScheduleFamily::with_omega(Curve::ExtremeClamp, omega, horizon).unwrap();
            worst = worst.max((max_timestep_gap(&fam) - omega * horizon / 2.0).abs());
        }
    }
    let omegas = vec![0.1, 0.3, 0.5, 0.7, 0.9];
    let sweep = RunConfig {
        out_dir: config.out_dir.join("omega"),
        mask_policy: MaskPolicyName::Dynamic,
        samples: 4,
        omega_sweep: omegas.clone(),
        ..config.clone()
    };
    let curve = match harness::run(Command::Sample, &sweep) {
        Ok(outcome) => {
            let report = outcome.report.expect("omega sweep report");
            omegas
                .iter()
                .map(|w| {
                    let m = report.metric(&format!("residual_noise_energy@omega={w}"));
                    m.map_or(format!("{w}: missing"), |r| {
                        format!("{w}: {:.4} (n={})", r.value, r.sample_count)
                    })
                })
                .collect::<Vec<_>>()
                .join(", ")
        }
        Err(e) => format!("unavailable ({e})"),
    };
    (
        worst <= 1e-9,
        format!("max |gap - omega T / 2| {worst:.1e} (tol 1e-9) for omega 0.1..0.9, T in {{10, 50, 200}}; residual noise by omega (report only) {curve}"),
    )
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let config = pipeline_config(scratch.path());
    let verdicts = [
        timed("shift solver", secs(5), shift_solver),
        timed("synchronous reduction", secs(10), synchronous_reduction),
        timed("termination and band", secs(30), termination_band),
        timed("gaussian end-to-end", secs(300), gaussian_end_to_end),
        timed("oracle correctness", secs(120), oracle_correctness),
        timed("gradient suite", secs(120), gradient_suite),
        timed("mask extraction", secs(3600), || mask_extraction(&config)),
        timed("omega timestep gap", secs(600), || timestep_gap(&config)),
    ];
    let mut failed = 0;
    for v in &verdicts {
        println!(
            "[{}] {}: {} [{:.1}s of {}s]",
            if v.passed { "PASS" } else { "FAIL" },
            v.name,
            v.detail,
            v.elapsed.as_secs_f64(),
            v.budget.as_secs()
        );
        failed += usize::from(!v.passed);
    }
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
