use rand::Rng;

use asyndiff::denoiser::{NetParams, TinyCondDenoiser, PARAM_BLOCKS};
use asyndiff::sampler::sample_rng;

mod common;
use common::{finite_difference_report, grad_problem, gradient_config, FD_REL_TOL};

#[test]
fn every_block_matches_central_differences() {
    let model = TinyCondDenoiser::new(gradient_config(), 3).unwrap();
    let report = finite_difference_report(&model, &grad_problem(4), 5, 5);
    assert_eq!(report.len(), PARAM_BLOCKS);
    for (name, err) in &report {
        assert!(*err <= FD_REL_TOL, "block {name}: relative error {err:e}");
    }
}

#[test]
fn gradients_hold_away_from_initialization() {
    // perturbed weights exercise saturated activations and peaked attention
    let mut model = TinyCondDenoiser::new(gradient_config(), 8).unwrap();
    let mut rng = sample_rng(8, 2);
    for block in &mut model.params.blocks {
        for v in block.iter_mut() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
    }
    for (name, err) in finite_difference_report(&model, &grad_problem(9), 4, 10) {
        assert!(err <= FD_REL_TOL, "block {name}: relative error {err:e}");
    }
}

#[test]
fn gradient_accumulates_across_calls() {
    let model = TinyCondDenoiser::new(gradient_config(), 3).unwrap();
    let p = grad_problem(4);
    let mut once = NetParams::zeros_like(&model.params);
    model
        .loss_and_grad(&p.x, &p.field, &p.tokens, &p.target, &mut once)
        .unwrap();
    let mut twice = NetParams::zeros_like(&model.params);
    for _ in 0..2 {
        model
            .loss_and_grad(&p.x, &p.field, &p.tokens, &p.target, &mut twice)
            .unwrap();
    }
    for (a, b) in once.blocks.iter().flatten().zip(twice.blocks.iter().flatten()) {
        assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}
