//! Helpers shared by the oracle test suites.

#![allow(dead_code)]

use mixvae::nn::{Mlp, MlpGrads};
use mixvae::vae::{Vae, VaeGrads};

/// Asserts `|a - b| <= abs_tol + rel_tol * scale` with
/// `scale = max(|a|, |b|, 1)`.
pub fn assert_close(a: f64, b: f64, abs_tol: f64, rel_tol: f64, what: &str) {
    let scale = a.abs().max(b.abs()).max(1.0);
    let diff = (a - b).abs();
    assert!(
        diff <= abs_tol + rel_tol * scale,
        "{what}: {a} vs {b} (diff {diff:.3e}, allowed {:.3e})",
        abs_tol + rel_tol * scale
    );
}

/// Relative error with the same guarded scale as [`assert_close`].
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Total number of scalar parameters in the network.
pub fn param_count(mlp: &Mlp<f64>) -> usize {
    mlp.num_params()
}

/// Locates parameter `idx` in the flat order: per layer, weights row-major,
/// then biases. Returns layer, `Some((row, col))` for a weight or `None`
/// for a bias, and the bias index.
fn locate(lens: impl Iterator<Item = (usize, usize)>, idx: usize) -> (usize, Option<usize>, usize) {
    let mut remaining = idx;
    for (layer, (w_len, b_len)) in lens.enumerate() {
        if remaining < w_len {
            return (layer, Some(remaining), 0);
        }
        remaining -= w_len;
        if remaining < b_len {
            return (layer, None, remaining);
        }
        remaining -= b_len;
    }
    panic!("parameter index {idx} out of range");
}

fn layer_lens(mlp: &Mlp<f64>) -> impl Iterator<Item = (usize, usize)> + '_ {
    mlp.layers.iter().map(|l| (l.weight.len(), l.bias.len()))
}

pub fn get_param(mlp: &Mlp<f64>, idx: usize) -> f64 {
    let (layer, flat_w, b) = locate(layer_lens(mlp), idx);
    let l = &mlp.layers[layer];
    match flat_w {
        Some(flat) => l.weight[[flat / l.weight.ncols(), flat % l.weight.ncols()]],
        None => l.bias[b],
    }
}

pub fn set_param(mlp: &mut Mlp<f64>, idx: usize, v: f64) {
    let (layer, flat_w, b) = locate(layer_lens(mlp), idx);
    let l = &mut mlp.layers[layer];
    match flat_w {
        Some(flat) => {
            let cols = l.weight.ncols();
            l.weight[[flat / cols, flat % cols]] = v;
        }
        None => l.bias[b] = v,
    }
}

/// Gradient for parameter `idx` in the same flat order as [`get_param`].
pub fn get_grad(grads: &MlpGrads<f64>, idx: usize) -> f64 {
    let lens = grads.layers.iter().map(|l| (l.weight.len(), l.bias.len()));
    let (layer, flat_w, b) = locate(lens, idx);
    let l = &grads.layers[layer];
    match flat_w {
        Some(flat) => l.weight[[flat / l.weight.ncols(), flat % l.weight.ncols()]],
        None => l.bias[b],
    }
}

/// Central finite difference of `loss` in parameter `idx`.
pub fn central_diff(
    mlp: &mut Mlp<f64>,
    idx: usize,
    h: f64,
    loss: &mut dyn FnMut(&Mlp<f64>) -> f64,
) -> f64 {
    let orig = get_param(mlp, idx);
    set_param(mlp, idx, orig + h);
    let up = loss(mlp);
    set_param(mlp, idx, orig - h);
    let down = loss(mlp);
    set_param(mlp, idx, orig);
    (up - down) / (2.0 * h)
}

/// VAE parameters in the flat order trunk, mean head, logvar head,
/// decoder, each group ordered like [`get_param`].

pub fn vae_param_count(vae: &Vae<f64>) -> usize {
    vae.num_params()
}

fn vae_group_of(vae: &Vae<f64>, idx: usize) -> (usize, usize) {
    let sizes = [
        vae.trunk().num_params(),
        vae.mean_head().num_params(),
        vae.logvar_head().num_params(),
        vae.decoder().num_params(),
    ];
    let mut remaining = idx;
    for (g, &len) in sizes.iter().enumerate() {
        if remaining < len {
            return (g, remaining);
        }
        remaining -= len;
    }
    panic!("vae parameter index {idx} out of range");
}

pub fn vae_get_param(vae: &Vae<f64>, idx: usize) -> f64 {
    let (g, inner) = vae_group_of(vae, idx);
    let mlp = [
        vae.trunk(),
        vae.mean_head(),
        vae.logvar_head(),
        vae.decoder(),
    ][g];
    get_param(mlp, inner)
}

pub fn vae_set_param(vae: &mut Vae<f64>, idx: usize, v: f64) {
    let (g, inner) = vae_group_of(vae, idx);
    let mlp = match g {
        0 => vae.trunk_mut(),
        1 => vae.mean_head_mut(),
        2 => vae.logvar_head_mut(),
        _ => vae.decoder_mut(),
    };
    set_param(mlp, inner, v);
}

pub fn vae_get_grad(vae: &Vae<f64>, grads: &VaeGrads<f64>, idx: usize) -> f64 {
    let (g, inner) = vae_group_of(vae, idx);
    let group = [
        &grads.trunk,
        &grads.mean_head,
        &grads.logvar_head,
        &grads.decoder,
    ][g];
    get_grad(group, inner)
}

/// Central finite difference of `loss` in VAE parameter `idx`.
pub fn vae_central_diff(
    vae: &mut Vae<f64>,
    idx: usize,
    h: f64,
    loss: &mut dyn FnMut(&Vae<f64>) -> f64,
) -> f64 {
    let orig = vae_get_param(vae, idx);
    vae_set_param(vae, idx, orig + h);
    let up = loss(vae);
    vae_set_param(vae, idx, orig - h);
    let down = loss(vae);
    vae_set_param(vae, idx, orig);
    (up - down) / (2.0 * h)
}
