//! Multilayer perceptrons with exact reverse-mode gradients.
//!
//! Layers store weights row-major as `(out, in)`; a batch of inputs is
//! `(batch, in)` and forward passes are plain matrix products. Hidden
//! layers apply a leaky ReLU and, in training mode, inverted dropout.
//! The final layer is linear unless the network is built with
//! [`OutputMode::Activated`], which treats it like a hidden layer.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng;
use crate::scalar::Scalar;

/// Weight matrix `(out, in)` plus bias `(out,)`. Also serves as the shape
/// carrier for gradients and optimizer moments.
#[derive(Clone, Debug)]
pub struct Layer<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Layer<F> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Layer {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn is_all_finite(&self) -> bool {
        self.weight.iter().all(|v| v.is_finite()) && self.bias.iter().all(|v| v.is_finite())
    }
}

/// Whether the final layer output is left linear or activated like a
/// hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputMode {
    Linear,
    Activated,
}

/// Fully connected network with leaky ReLU activations.
#[derive(Clone, Debug)]
pub struct Mlp<F> {
    pub layers: Vec<Layer<F>>,
    pub slope: F,
    pub output: OutputMode,
}

/// Per-layer gradients in the same shapes as [`Mlp::layers`].
#[derive(Clone, Debug)]
pub struct MlpGrads<F> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Scalar> MlpGrads<F> {
    pub fn zeros_like(mlp: &Mlp<F>) -> Self {
        MlpGrads {
            layers: mlp
                .layers
                .iter()
                .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
                .collect(),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_all_finite)
    }

    /// Adds `s * other` elementwise.
    pub fn add_scaled(&mut self, other: &MlpGrads<F>, s: F) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(s, &b.weight);
            a.bias.scaled_add(s, &b.bias);
        }
    }

    pub fn scale(&mut self, s: F) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|v| v * s);
            l.bias.mapv_inplace(|v| v * s);
        }
    }
}

/// Activations recorded by a training forward pass, consumed by
/// [`Mlp::backward`].
pub struct ForwardCache<F> {
    /// `inputs[l]` is the batch fed to layer `l`; `inputs[0]` is the data.
    inputs: Vec<Array2<F>>,
    /// Network output after the final activation and mask, if any.
    output: Array2<F>,
    /// Inverted dropout masks for layers that applied one.
    masks: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> ForwardCache<F> {
    pub fn output(&self) -> &Array2<F> {
        &self.output
    }

    pub fn into_output(self) -> Array2<F> {
        self.output
    }
}

impl<F: Scalar> Mlp<F> {
    /// Builds a network with Xavier uniform weights and zero biases.
    ///
    /// `dims` lists the input width followed by every layer width, so it
    /// needs at least two entries. Weights are drawn row-major from
    /// `U(-limit, limit)` with `limit = sqrt(6 / (fan_in + fan_out))`.
    pub fn new(dims: &[usize], slope: F, output: OutputMode, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "need an input and at least one layer");
        assert!(dims.iter().all(|&d| d > 0), "zero-width layer");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((n_out, n_in), || {
                        rng::uniform(rng, -limit, limit)
                    }),
                    bias: Array1::zeros(n_out),
                }
            })
            .collect();
        Mlp {
            layers,
            slope,
            output,
        }
    }

    /// Input width followed by every layer width.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(Layer::out_dim));
        dims
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn activate_at(&self, l: usize) -> bool {
        l + 1 < self.layers.len() || self.output == OutputMode::Activated
    }

    /// Inference pass without dropout or caching.
    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        assert_eq!(x.ncols(), self.in_dim(), "input width mismatch");
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if self.activate_at(l) {
                leaky_relu_inplace(&mut z, self.slope);
            }
            h = z;
        }
        h
    }

    /// Inference pass for a single input vector.
    pub fn forward1(&self, x: ArrayView1<F>) -> Array1<F> {
        self.forward(x.insert_axis(Axis(0)))
            .index_axis_move(Axis(0), 0)
    }

    /// Training pass that records activations for [`Mlp::backward`].
    ///
    /// `dropout` is the drop probability applied after each activation;
    /// surviving units are scaled by `1 / (1 - dropout)` so inference needs
    /// no rescaling. Pass zero to disable; `rng` is untouched then.
    pub fn forward_train(
        &self,
        x: ArrayView2<F>,
        dropout: F,
        rng: &mut ChaCha8Rng,
    ) -> ForwardCache<F> {
        assert_eq!(x.ncols(), self.in_dim(), "input width mismatch");
        assert!(
            dropout >= F::zero() && dropout < F::one(),
            "dropout must lie in [0, 1)"
        );
        let rate = dropout.to_f64();
        let keep_inv = F::from_f64(1.0 / (1.0 - rate));
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            inputs.push(h);
            let mut mask = None;
            if self.activate_at(l) {
                leaky_relu_inplace(&mut z, self.slope);
                if rate > 0.0 {
                    let m = Array2::from_shape_simple_fn(z.dim(), || {
                        if rng.random::<f64>() < rate {
                            F::zero()
                        } else {
                            keep_inv
                        }
                    });
                    z *= &m;
                    mask = Some(m);
                }
            }
            masks.push(mask);
            h = z;
        }
        ForwardCache {
            inputs,
            output: h,
            masks,
        }
    }

    /// Exact reverse-mode gradients for the pass recorded in `cache`.
    ///
    /// `d_output` is the loss gradient at the network output. Returns
    /// parameter gradients and, when `need_input_grad` is set, the loss
    /// gradient at the network input.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        d_output: ArrayView2<F>,
        need_input_grad: bool,
    ) -> (MlpGrads<F>, Option<Array2<F>>) {
        let n_layers = self.layers.len();
        assert_eq!(cache.inputs.len(), n_layers, "cache does not match network");
        assert_eq!(d_output.dim(), cache.output.dim(), "output grad mismatch");
        let mut grads = Vec::with_capacity(n_layers);
        let mut d = d_output.to_owned();
        let mut d_input = None;
        for l in (0..n_layers).rev() {
            if self.activate_at(l) {
                let out_l = if l + 1 == n_layers {
                    &cache.output
                } else {
                    &cache.inputs[l + 1]
                };
                if let Some(mask) = &cache.masks[l] {
                    d *= mask;
                }
                // Post-activation sign equals pre-activation sign, so the
                // cached output is enough to pick the ReLU branch. Masked
                // units already have zero gradient.
                let slope = self.slope;
                Zip::from(&mut d).and(out_l).for_each(|dv, &o| {
                    if o <= F::zero() {
                        *dv = *dv * slope;
                    }
                });
            }
            grads.push(Layer {
                weight: d.t().dot(&cache.inputs[l]),
                bias: d.sum_axis(Axis(0)),
            });
            if l > 0 {
                d = d.dot(&self.layers[l].weight);
            } else if need_input_grad {
                d_input = Some(d.dot(&self.layers[l].weight));
            }
        }
        grads.reverse();
        (MlpGrads { layers: grads }, d_input)
    }
}

/// Leaky ReLU, elementwise in place: `z` if positive, `slope * z` otherwise.
pub fn leaky_relu_inplace<F: Scalar>(z: &mut Array2<F>, slope: F) {
    z.mapv_inplace(|v| if v > F::zero() { v } else { v * slope });
}

/// Gradient contained a NaN or infinity; the optimizer left parameters
/// untouched.
#[derive(Debug, Error)]
#[error("non-finite gradient, update skipped")]
pub struct NonFiniteGrad;

/// Adam optimizer state for one [`Mlp`].
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    m: Vec<Layer<F>>,
    v: Vec<Layer<F>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: F,
}

impl<F: Scalar> AdamState<F> {
    /// Zero-moment state with the standard defaults `beta1 = 0.9`,
    /// `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(mlp: &Mlp<F>) -> Self {
        let zeros = || {
            mlp.layers
                .iter()
                .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
                .collect::<Vec<_>>()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: F::from_f64(1e-8),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One Adam update with bias correction.
    ///
    /// Rejects non-finite gradients without touching parameters, moments,
    /// or the step counter, so a skipped batch leaves the optimizer exactly
    /// where it was.
    pub fn step(
        &mut self,
        mlp: &mut Mlp<F>,
        grads: &MlpGrads<F>,
        lr: F,
    ) -> Result<(), NonFiniteGrad> {
        assert_eq!(grads.layers.len(), mlp.layers.len());
        if !grads.is_all_finite() {
            return Err(NonFiniteGrad);
        }
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bias_corrected_lr = F::from_f64(
            lr.to_f64() * (1.0 - self.beta2.powi(self.t as i32)).sqrt()
                / (1.0 - self.beta1.powi(self.t as i32)),
        );
        let eps = self.eps;
        for ((layer, grad), (m, v)) in mlp
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            let update = |p: &mut F, g: F, m: &mut F, v: &mut F| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p - bias_corrected_lr * *m / (v.sqrt() + eps);
            };
            Zip::from(&mut layer.weight)
                .and(&grad.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            Zip::from(&mut layer.bias)
                .and(&grad.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }
}
