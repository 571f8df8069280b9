//! Finite-difference oracle for MLP backpropagation.
//!
//! The analytic gradients from `Mlp::backward` are compared against central
//! differences of a scalar loss for every parameter, across random
//! architectures, with linear and activated outputs, and with dropout
//! masks held fixed.

mod common;

use common::{assert_close, central_diff, get_grad, param_count};
use mixvae::nn::{Mlp, OutputMode};
use mixvae::rng::{normal_matrix, substream, tags};
use ndarray::Array2;
use rand::Rng;

const FD_STEP: f64 = 1e-6;
const ABS_TOL: f64 = 1e-7;
const REL_TOL: f64 = 1e-6;

/// Half squared error against fixed targets; gradient at the output is
/// `y - t`.
fn half_sse(y: &Array2<f64>, t: &Array2<f64>) -> f64 {
    y.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0
}

fn random_dims(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let depth = rng.random_range(1..=3usize);
    let mut dims = vec![rng.random_range(1..=5usize)];
    for _ in 0..depth {
        dims.push(rng.random_range(1..=6usize));
    }
    dims
}

/// Moves every parameter to a generic position. Freshly built networks
/// have zero biases, and a dropped-out unit then feeds the exact kink of
/// the next leaky ReLU, where finite differences and subgradients
/// legitimately disagree.
fn jitter_params(mlp: &mut Mlp<f64>, rng: &mut rand_chacha::ChaCha8Rng) {
    for idx in 0..param_count(mlp) {
        let v = common::get_param(mlp, idx);
        common::set_param(mlp, idx, v + rng.random_range(-0.3..0.3));
    }
}

fn check_param_grads(case: u64, output: OutputMode, dropout: f64) {
    let mut meta = substream(900 + case, &[tags::INIT_PARAMS]);
    let dims = random_dims(&mut meta);
    let batch = meta.random_range(1..=4usize);
    let mut mlp = Mlp::new(&dims, 0.2, output, &mut meta);
    jitter_params(&mut mlp, &mut meta);
    let x = normal_matrix::<f64>(&mut meta, batch, dims[0]);
    let t = normal_matrix::<f64>(&mut meta, batch, *dims.last().unwrap());

    // A fixed seed freezes the dropout masks, making the loss a
    // deterministic function of the parameters.
    let mask_seed = 4242 + case;
    let mut eval = |m: &Mlp<f64>| -> f64 {
        let mut rng = substream(mask_seed, &[tags::M_STEP]);
        half_sse(m.forward_train(x.view(), dropout, &mut rng).output(), &t)
    };

    let cache = {
        let mut rng = substream(mask_seed, &[tags::M_STEP]);
        mlp.forward_train(x.view(), dropout, &mut rng)
    };
    let d_out = cache.output() - &t;
    let (grads, _) = mlp.backward(&cache, d_out.view(), false);

    for idx in 0..param_count(&mlp) {
        let numeric = central_diff(&mut mlp, idx, FD_STEP, &mut eval);
        let analytic = get_grad(&grads, idx);
        assert_close(
            analytic,
            numeric,
            ABS_TOL,
            REL_TOL,
            &format!("case {case} dims {dims:?} dropout {dropout} param {idx}"),
        );
    }
}

#[test]
fn param_grads_match_fd_linear_output() {
    for case in 0..12 {
        check_param_grads(case, OutputMode::Linear, 0.0);
    }
}

#[test]
fn param_grads_match_fd_activated_output() {
    for case in 20..32 {
        check_param_grads(case, OutputMode::Activated, 0.0);
    }
}

#[test]
fn param_grads_match_fd_with_dropout() {
    for case in 40..52 {
        check_param_grads(case, OutputMode::Linear, 0.3);
    }
}

#[test]
fn input_grads_match_fd() {
    for case in 60..72u64 {
        let mut meta = substream(900 + case, &[tags::INIT_PARAMS]);
        let dims = random_dims(&mut meta);
        let batch = meta.random_range(1..=4usize);
        let mlp = Mlp::new(&dims, 0.2, OutputMode::Linear, &mut meta);
        let mut x = normal_matrix::<f64>(&mut meta, batch, dims[0]);
        let t = normal_matrix::<f64>(&mut meta, batch, *dims.last().unwrap());

        let mut rng = substream(1, &[tags::M_STEP]);
        let cache = mlp.forward_train(x.view(), 0.0, &mut rng);
        let d_out = cache.output() - &t;
        let (_, d_input) = mlp.backward(&cache, d_out.view(), true);
        let d_input = d_input.expect("input grad requested");

        for r in 0..batch {
            for c in 0..dims[0] {
                let orig = x[[r, c]];
                x[[r, c]] = orig + FD_STEP;
                let up = half_sse(&mlp.forward(x.view()), &t);
                x[[r, c]] = orig - FD_STEP;
                let down = half_sse(&mlp.forward(x.view()), &t);
                x[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                assert_close(
                    d_input[[r, c]],
                    numeric,
                    ABS_TOL,
                    REL_TOL,
                    &format!("case {case} input ({r},{c})"),
                );
            }
        }
    }
}
