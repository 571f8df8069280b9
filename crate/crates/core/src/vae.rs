//! Variational autoencoder with diagonal Gaussian encoder and unit
//! variance Gaussian decoder.
//!
//! The encoder is a shared trunk whose last hidden activation feeds two
//! linear heads, one for the latent mean and one for the latent log
//! variance. The decoder maps latents back to data space with a linear
//! final layer. The evidence lower bound for one point is
//!
//! ```text
//! ELBO(x) = -(beta / 2L) * sum_l ||x - decode(mu + sigma <*> eps_l)||^2
//!           - KL(N(mu, diag(sigma^2)) || N(0, I))
//! ```
//!
//! estimated with `L` Monte Carlo draws through the reparameterization
//! `z = mu + exp(logvar / 2) <*> eps`. Additive constants of the Gaussian
//! likelihood are dropped throughout; only `beta` scales the
//! reconstruction term.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{AdamState, Mlp, MlpGrads, NonFiniteGrad, OutputMode};
use crate::rng;
use crate::scalar::Scalar;

/// Log variance clamp bounds, applied in the encoder and respected by the
/// gradient (clamped units get zero gradient).
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("bad architecture: {0}")]
    Architecture(String),
    #[error("non-finite KL term")]
    NonFiniteKl,
    #[error("non-finite reconstruction term at Monte Carlo draw {draw}")]
    NonFiniteRecon { draw: usize },
    #[error("non-finite training loss")]
    NonFiniteLoss,
}

/// Diagonal Gaussian over the latent space for one input.
#[derive(Clone, Debug)]
pub struct LatentGaussian<F> {
    pub mean: Array1<F>,
    pub logvar: Array1<F>,
}

impl<F: Scalar> LatentGaussian<F> {
    /// Closed form KL divergence to the standard normal:
    /// `0.5 * sum(exp(logvar) + mean^2 - 1 - logvar)`.
    pub fn kl_to_std_normal(&self) -> F {
        let mut acc = F::zero();
        for (&m, &lv) in self.mean.iter().zip(self.logvar.iter()) {
            acc += lv.exp() + m * m - F::one() - lv;
        }
        acc * F::half()
    }
}

/// Diagonal Gaussians for a batch, one row per input.
#[derive(Clone, Debug)]
pub struct LatentBatch<F> {
    pub mean: Array2<F>,
    pub logvar: Array2<F>,
}

impl<F: Scalar> LatentBatch<F> {
    pub fn row(&self, i: usize) -> LatentGaussian<F> {
        LatentGaussian {
            mean: self.mean.row(i).to_owned(),
            logvar: self.logvar.row(i).to_owned(),
        }
    }

    /// KL divergence to the standard normal, one value per row.
    pub fn kl_to_std_normal(&self) -> Array1<F> {
        let mut out = Array1::zeros(self.mean.nrows());
        Zip::from(&mut out)
            .and(self.mean.rows())
            .and(self.logvar.rows())
            .for_each(|o, m, lv| {
                let mut acc = F::zero();
                for (&mv, &lvv) in m.iter().zip(lv.iter()) {
                    acc += lvv.exp() + mv * mv - F::one() - lvv;
                }
                *o = acc * F::half();
            });
        out
    }
}

/// Gradients for the four parameter groups of a [`Vae`].
#[derive(Clone, Debug)]
pub struct VaeGrads<F> {
    pub trunk: MlpGrads<F>,
    pub mean_head: MlpGrads<F>,
    pub logvar_head: MlpGrads<F>,
    pub decoder: MlpGrads<F>,
}

impl<F: Scalar> VaeGrads<F> {
    pub fn zeros_like(vae: &Vae<F>) -> Self {
        VaeGrads {
            trunk: MlpGrads::zeros_like(&vae.trunk),
            mean_head: MlpGrads::zeros_like(&vae.mean_head),
            logvar_head: MlpGrads::zeros_like(&vae.logvar_head),
            decoder: MlpGrads::zeros_like(&vae.decoder),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.trunk.is_all_finite()
            && self.mean_head.is_all_finite()
            && self.logvar_head.is_all_finite()
            && self.decoder.is_all_finite()
    }

    pub fn scale(&mut self, s: F) {
        self.trunk.scale(s);
        self.mean_head.scale(s);
        self.logvar_head.scale(s);
        self.decoder.scale(s);
    }
}

/// Adam state for the four parameter groups of a [`Vae`].
#[derive(Clone, Debug)]
pub struct VaeAdam<F> {
    trunk: AdamState<F>,
    mean_head: AdamState<F>,
    logvar_head: AdamState<F>,
    decoder: AdamState<F>,
}

impl<F: Scalar> VaeAdam<F> {
    pub fn new(vae: &Vae<F>) -> Self {
        VaeAdam {
            trunk: AdamState::new(&vae.trunk),
            mean_head: AdamState::new(&vae.mean_head),
            logvar_head: AdamState::new(&vae.logvar_head),
            decoder: AdamState::new(&vae.decoder),
        }
    }

    /// One Adam update across all groups, rejected atomically if any
    /// gradient is non-finite.
    pub fn step(
        &mut self,
        vae: &mut Vae<F>,
        grads: &VaeGrads<F>,
        lr: F,
    ) -> Result<(), NonFiniteGrad> {
        if !grads.is_all_finite() {
            return Err(NonFiniteGrad);
        }
        self.trunk.step(&mut vae.trunk, &grads.trunk, lr)?;
        self.mean_head.step(&mut vae.mean_head, &grads.mean_head, lr)?;
        self.logvar_head
            .step(&mut vae.logvar_head, &grads.logvar_head, lr)?;
        self.decoder.step(&mut vae.decoder, &grads.decoder, lr)?;
        Ok(())
    }
}

/// Source of reparameterization noise for a gradient pass.
enum EpsSource<'a, F> {
    /// Draw this many fresh standard normal tensors from the stream.
    Draw(usize),
    /// Fixed draws shaped `(num_mc, batch, latent_dim)`.
    Given(ArrayView3<'a, F>),
}

/// Variational autoencoder. Cloning copies parameters only; optimizer
/// state lives in [`VaeAdam`].
#[derive(Clone, Debug)]
pub struct Vae<F> {
    trunk: Mlp<F>,
    mean_head: Mlp<F>,
    logvar_head: Mlp<F>,
    decoder: Mlp<F>,
    beta: F,
    dropout: F,
    /// Key for noise streams tied to this model. Travels with the model,
    /// so relabeling clusters relabels their random trajectories too.
    pub stream_seed: u64,
}

impl<F: Scalar> Vae<F> {
    /// Builds a VAE with Xavier uniform weights.
    ///
    /// `encoder_dims` is `[data, hidden.., latent]` with at least one
    /// hidden layer; the trunk covers `[data, hidden..]` and both heads
    /// map the last hidden width to the latent width. `decoder_dims` is
    /// `[latent, .., data]`. Parameter groups are initialized from `rng`
    /// in the order trunk, mean head, logvar head, decoder.
    pub fn new(
        encoder_dims: &[usize],
        decoder_dims: &[usize],
        slope: F,
        dropout: F,
        beta: F,
        stream_seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, VaeError> {
        if encoder_dims.len() < 3 {
            return Err(VaeError::Architecture(format!(
                "encoder dims {encoder_dims:?} need [data, hidden.., latent]"
            )));
        }
        if decoder_dims.len() < 2 {
            return Err(VaeError::Architecture(format!(
                "decoder dims {decoder_dims:?} need [latent, .., data]"
            )));
        }
        let data_dim = encoder_dims[0];
        let latent_dim = *encoder_dims.last().unwrap();
        if decoder_dims[0] != latent_dim {
            return Err(VaeError::Architecture(format!(
                "decoder input {} does not match latent width {latent_dim}",
                decoder_dims[0]
            )));
        }
        if *decoder_dims.last().unwrap() != data_dim {
            return Err(VaeError::Architecture(format!(
                "decoder output {} does not match data width {data_dim}",
                decoder_dims.last().unwrap()
            )));
        }
        let trunk_dims = &encoder_dims[..encoder_dims.len() - 1];
        let head_dims = [trunk_dims[trunk_dims.len() - 1], latent_dim];
        let trunk = Mlp::new(trunk_dims, slope, OutputMode::Activated, rng);
        let mean_head = Mlp::new(&head_dims, slope, OutputMode::Linear, rng);
        let logvar_head = Mlp::new(&head_dims, slope, OutputMode::Linear, rng);
        let decoder = Mlp::new(decoder_dims, slope, OutputMode::Linear, rng);
        Ok(Vae {
            trunk,
            mean_head,
            logvar_head,
            decoder,
            beta,
            dropout,
            stream_seed,
        })
    }

    /// Reassembles a VAE from its parts, validating the wiring.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        trunk: Mlp<F>,
        mean_head: Mlp<F>,
        logvar_head: Mlp<F>,
        decoder: Mlp<F>,
        beta: F,
        dropout: F,
        stream_seed: u64,
    ) -> Result<Self, VaeError> {
        let h = trunk.out_dim();
        if mean_head.in_dim() != h || logvar_head.in_dim() != h {
            return Err(VaeError::Architecture(
                "head input does not match trunk output".into(),
            ));
        }
        let z = mean_head.out_dim();
        if logvar_head.out_dim() != z || decoder.in_dim() != z {
            return Err(VaeError::Architecture(
                "latent widths disagree across heads and decoder".into(),
            ));
        }
        if decoder.out_dim() != trunk.in_dim() {
            return Err(VaeError::Architecture(
                "decoder output does not match data width".into(),
            ));
        }
        Ok(Vae {
            trunk,
            mean_head,
            logvar_head,
            decoder,
            beta,
            dropout,
            stream_seed,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean_head.out_dim()
    }

    pub fn beta(&self) -> F {
        self.beta
    }

    pub fn dropout(&self) -> F {
        self.dropout
    }

    pub fn trunk(&self) -> &Mlp<F> {
        &self.trunk
    }

    pub fn mean_head(&self) -> &Mlp<F> {
        &self.mean_head
    }

    pub fn logvar_head(&self) -> &Mlp<F> {
        &self.logvar_head
    }

    pub fn decoder(&self) -> &Mlp<F> {
        &self.decoder
    }

    /// Mutable parameter access. Callers must keep layer shapes intact.
    pub fn trunk_mut(&mut self) -> &mut Mlp<F> {
        &mut self.trunk
    }

    pub fn mean_head_mut(&mut self) -> &mut Mlp<F> {
        &mut self.mean_head
    }

    pub fn logvar_head_mut(&mut self) -> &mut Mlp<F> {
        &mut self.logvar_head
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp<F> {
        &mut self.decoder
    }

    /// `[data, hidden.., latent]` as passed to [`Vae::new`].
    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = self.trunk.dims();
        dims.push(self.latent_dim());
        dims
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        self.decoder.dims()
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params()
            + self.mean_head.num_params()
            + self.logvar_head.num_params()
            + self.decoder.num_params()
    }

    /// Adds `s * grads` to every parameter. Plain gradient descent is
    /// `add_scaled_grads(&grads, -lr)`.
    pub fn add_scaled_grads(&mut self, grads: &VaeGrads<F>, s: F) {
        for (mlp, g) in [
            (&mut self.trunk, &grads.trunk),
            (&mut self.mean_head, &grads.mean_head),
            (&mut self.logvar_head, &grads.logvar_head),
            (&mut self.decoder, &grads.decoder),
        ] {
            for (layer, gl) in mlp.layers.iter_mut().zip(&g.layers) {
                layer.weight.scaled_add(s, &gl.weight);
                layer.bias.scaled_add(s, &gl.bias);
            }
        }
    }

    /// Encoder pass without dropout. Log variances are clamped to
    /// `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn encode_batch(&self, x: ArrayView2<F>) -> LatentBatch<F> {
        let h = self.trunk.forward(x);
        let mean = self.mean_head.forward(h.view());
        let mut logvar = self.logvar_head.forward(h.view());
        clamp_logvar(&mut logvar);
        LatentBatch { mean, logvar }
    }

    pub fn encode(&self, x: ArrayView1<F>) -> LatentGaussian<F> {
        self.encode_batch(x.insert_axis(Axis(0))).row(0)
    }

    /// Deterministic reparameterization `mu + exp(logvar / 2) <*> eps`.
    pub fn reparameterize(latent: &LatentGaussian<F>, eps: ArrayView1<F>) -> Array1<F> {
        assert_eq!(eps.len(), latent.mean.len(), "noise width mismatch");
        let mut z = latent.logvar.mapv(|v| (v * F::half()).exp());
        z *= &eps;
        z += &latent.mean;
        z
    }

    /// Decoder pass without dropout.
    pub fn decode_batch(&self, z: ArrayView2<F>) -> Array2<F> {
        self.decoder.forward(z)
    }

    pub fn decode(&self, z: ArrayView1<F>) -> Array1<F> {
        self.decoder.forward1(z)
    }

    /// Monte Carlo ELBO for one point with `num_mc` fresh draws.
    ///
    /// Deterministic networks: dropout stays off. Non-finite terms are
    /// reported with the offending draw.
    pub fn elbo_estimate(
        &self,
        x: ArrayView1<F>,
        num_mc: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<F, VaeError> {
        assert!(num_mc > 0, "need at least one Monte Carlo draw");
        let eps = rng::normal_matrix(rng, num_mc, self.latent_dim());
        let latent = self.encode(x);
        let kl = latent.kl_to_std_normal();
        if !kl.is_finite() {
            return Err(VaeError::NonFiniteKl);
        }
        let mut recon = F::zero();
        for l in 0..num_mc {
            let z = Self::reparameterize(&latent, eps.row(l));
            let xhat = self.decode(z.view());
            let mut sq = F::zero();
            for (&a, &b) in xhat.iter().zip(x.iter()) {
                let d = a - b;
                sq += d * d;
            }
            if !sq.is_finite() {
                return Err(VaeError::NonFiniteRecon { draw: l });
            }
            recon += sq;
        }
        let l = F::from_usize(num_mc);
        Ok(-(self.beta * F::half() / l) * recon - kl)
    }

    /// Batched ELBO with fresh draws; one value per row of `x`.
    ///
    /// Noise is drawn as one `(num_mc * n, latent)` block so the stream
    /// consumption depends only on the batch shape.
    pub fn elbo_batch(&self, x: ArrayView2<F>, num_mc: usize, rng: &mut ChaCha8Rng) -> Array1<F> {
        let eps = rng::normal_matrix(rng, num_mc * x.nrows(), self.latent_dim())
            .into_shape_with_order((num_mc, x.nrows(), self.latent_dim()))
            .expect("row count matches");
        self.elbo_batch_with_eps(x, eps.view())
    }

    /// Batched ELBO with fixed noise `(num_mc, n, latent)`.
    ///
    /// All decoder inputs are stacked into one matrix product, so this is
    /// also the fast path for scoring.
    pub fn elbo_batch_with_eps(&self, x: ArrayView2<F>, eps: ArrayView3<F>) -> Array1<F> {
        let n = x.nrows();
        let (num_mc, eps_n, eps_z) = eps.dim();
        assert_eq!(eps_n, n, "noise batch mismatch");
        assert_eq!(eps_z, self.latent_dim(), "noise width mismatch");
        assert!(num_mc > 0, "need at least one Monte Carlo draw");
        let latent = self.encode_batch(x);
        let kl = latent.kl_to_std_normal();
        let sigma = latent.logvar.mapv(|v| (v * F::half()).exp());
        let mut z_all = Array2::zeros((num_mc * n, self.latent_dim()));
        for l in 0..num_mc {
            let mut block = z_all.slice_mut(ndarray::s![l * n..(l + 1) * n, ..]);
            block.assign(&latent.mean);
            Zip::from(&mut block)
                .and(&sigma)
                .and(&eps.index_axis(Axis(0), l))
                .for_each(|b, &s, &e| *b += s * e);
        }
        let xhat_all = self.decode_batch(z_all.view());
        let mut recon: Array1<F> = Array1::zeros(n);
        for l in 0..num_mc {
            let block = xhat_all.slice(ndarray::s![l * n..(l + 1) * n, ..]);
            Zip::from(&mut recon)
                .and(block.rows())
                .and(x.rows())
                .for_each(|acc, xh, xr| {
                    let mut sq = F::zero();
                    for (&a, &b) in xh.iter().zip(xr.iter()) {
                        let d = a - b;
                        sq += d * d;
                    }
                    *acc += sq;
                });
        }
        let scale = self.beta * F::half() / F::from_usize(num_mc);
        Zip::from(&mut recon).and(&kl).for_each(|r, &k| {
            *r = -*r * scale - k;
        });
        recon
    }

    /// ELBO for one point with fixed noise `(num_mc, latent)`.
    pub fn elbo_with_eps(&self, x: ArrayView1<F>, eps: ArrayView2<F>) -> F {
        let eps3 = eps.insert_axis(Axis(1));
        self.elbo_batch_with_eps(x.insert_axis(Axis(0)), eps3)[0]
    }

    /// ELBO value and gradients for one point. `training` enables dropout;
    /// noise comes from `rng` either way.
    pub fn elbo_grad(
        &self,
        x: ArrayView1<F>,
        num_mc: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(VaeGrads<F>, F), VaeError> {
        let w = Array1::from_elem(1, -F::one());
        let (grads, loss) = self.weighted_loss_grad(
            x.insert_axis(Axis(0)),
            w.view(),
            EpsSource::Draw(num_mc),
            training,
            rng,
        )?;
        Ok((grads, loss))
    }

    /// ELBO value and gradients for one point with fixed noise
    /// `(num_mc, latent)` and deterministic networks.
    pub fn elbo_grad_with_eps(
        &self,
        x: ArrayView1<F>,
        eps: ArrayView2<F>,
    ) -> Result<(VaeGrads<F>, F), VaeError> {
        let w = Array1::from_elem(1, -F::one());
        let eps3 = eps.insert_axis(Axis(1));
        let mut unused = rng::substream(0, &[]);
        let (grads, loss) = self.weighted_loss_grad(
            x.insert_axis(Axis(0)),
            w.view(),
            EpsSource::Given(eps3),
            false,
            &mut unused,
        )?;
        Ok((grads, loss))
    }

    /// Gradient of the weighted training loss
    /// `sum_i w_i * (-ELBO(x_i))` over a batch, with dropout active and
    /// noise drawn from `rng`. Returns the loss value with the gradients.
    pub fn weighted_elbo_grad(
        &self,
        x: ArrayView2<F>,
        w: ArrayView1<F>,
        num_mc: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(VaeGrads<F>, F), VaeError> {
        self.weighted_loss_grad(x, w, EpsSource::Draw(num_mc), true, rng)
    }

    /// Same loss as [`Vae::weighted_elbo_grad`] with fixed noise
    /// `(num_mc, n, latent)` and deterministic networks.
    pub fn weighted_elbo_grad_with_eps(
        &self,
        x: ArrayView2<F>,
        w: ArrayView1<F>,
        eps: ArrayView3<F>,
    ) -> Result<(VaeGrads<F>, F), VaeError> {
        let mut unused = rng::substream(0, &[]);
        self.weighted_loss_grad(x, w, EpsSource::Given(eps), false, &mut unused)
    }

    /// Weighted loss without gradients, summed exactly like the per-row
    /// ELBO path so accept/reject decisions and objective traces agree.
    pub fn weighted_loss_with_eps(&self, x: ArrayView2<F>, w: ArrayView1<F>, eps: ArrayView3<F>) -> F {
        let elbos = self.elbo_batch_with_eps(x, eps);
        let mut loss = F::zero();
        for (&wi, &e) in w.iter().zip(elbos.iter()) {
            loss += -wi * e;
        }
        loss
    }

    fn weighted_loss_grad(
        &self,
        x: ArrayView2<F>,
        w: ArrayView1<F>,
        eps: EpsSource<F>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(VaeGrads<F>, F), VaeError> {
        let n = x.nrows();
        assert_eq!(x.ncols(), self.data_dim(), "data width mismatch");
        assert_eq!(w.len(), n, "weight count mismatch");
        let dropout = if training { self.dropout } else { F::zero() };
        let zero = F::zero();

        // Stream order: trunk masks first, then per draw the noise block
        // followed by decoder masks.
        let trunk_cache = self.trunk.forward_train(x, dropout, rng);
        let mean_cache = self
            .mean_head
            .forward_train(trunk_cache.output().view(), zero, rng);
        let lv_cache = self
            .logvar_head
            .forward_train(trunk_cache.output().view(), zero, rng);
        let mu = mean_cache.output();
        let mut logvar = lv_cache.output().clone();
        let clamp_pass = logvar.mapv(|v| {
            let inside = v.to_f64() > LOGVAR_MIN && v.to_f64() < LOGVAR_MAX;
            if inside {
                F::one()
            } else {
                F::zero()
            }
        });
        clamp_logvar(&mut logvar);
        let sigma = logvar.mapv(|v| (v * F::half()).exp());

        let w_col = w.insert_axis(Axis(1));
        let mut loss = F::zero();
        for (&wi, (m, lv)) in w.iter().zip(mu.rows().into_iter().zip(logvar.rows())) {
            let mut acc = F::zero();
            for (&mv, &lvv) in m.iter().zip(lv.iter()) {
                acc += lvv.exp() + mv * mv - F::one() - lvv;
            }
            loss += wi * acc * F::half();
        }

        // KL gradients: d/dmu = w * mu, d/dlogvar = w * (exp(logvar) - 1) / 2.
        let mut d_mu = mu * &w_col;
        let mut d_lv = logvar.mapv(|v| (v.exp() - F::one()) * F::half()) * &w_col;

        let num_mc = match &eps {
            EpsSource::Draw(l) => *l,
            EpsSource::Given(e) => e.dim().0,
        };
        assert!(num_mc > 0, "need at least one Monte Carlo draw");
        if let EpsSource::Given(e) = &eps {
            assert_eq!(e.dim().1, n, "noise batch mismatch");
            assert_eq!(e.dim().2, self.latent_dim(), "noise width mismatch");
        }
        let inv_l = F::one() / F::from_usize(num_mc);
        let recon_scale = self.beta * inv_l;
        let mut decoder_grads = MlpGrads::zeros_like(&self.decoder);
        for l in 0..num_mc {
            let eps_l: Array2<F> = match &eps {
                EpsSource::Draw(_) => rng::normal_matrix(rng, n, self.latent_dim()),
                EpsSource::Given(e) => e.index_axis(Axis(0), l).to_owned(),
            };
            let mut z = &sigma * &eps_l;
            z += mu;
            let dec_cache = self.decoder.forward_train(z.view(), dropout, rng);
            let mut r = dec_cache.output() - &x;
            for (&wi, row) in w.iter().zip(r.rows()) {
                let mut sq = F::zero();
                for &v in row {
                    sq += v * v;
                }
                loss += wi * sq * F::half() * recon_scale;
            }
            r *= recon_scale;
            r *= &w_col;
            let (dg, dz) = self.decoder.backward(&dec_cache, r.view(), true);
            decoder_grads.add_scaled(&dg, F::one());
            let dz = dz.expect("input grad requested");
            Zip::from(&mut d_lv)
                .and(&dz)
                .and(&sigma)
                .and(&eps_l)
                .for_each(|acc, &d, &s, &e| *acc += d * s * e * F::half());
            d_mu += &dz;
        }
        d_lv *= &clamp_pass;

        let (mean_grads, dh_m) = self.mean_head.backward(&mean_cache, d_mu.view(), true);
        let (lv_grads, dh_v) = self.logvar_head.backward(&lv_cache, d_lv.view(), true);
        let mut dh = dh_m.expect("input grad requested");
        dh += &dh_v.expect("input grad requested");
        let (trunk_grads, _) = self.trunk.backward(&trunk_cache, dh.view(), false);

        if !loss.is_finite() {
            return Err(VaeError::NonFiniteLoss);
        }
        Ok((
            VaeGrads {
                trunk: trunk_grads,
                mean_head: mean_grads,
                logvar_head: lv_grads,
                decoder: decoder_grads,
            },
            loss,
        ))
    }

    /// Draws `count` latents from the standard normal prior and decodes
    /// them with deterministic networks. `count = 0` yields an empty
    /// batch.
    pub fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> Array2<F> {
        if count == 0 {
            return Array2::zeros((0, self.data_dim()));
        }
        let z = rng::normal_matrix(rng, count, self.latent_dim());
        self.decode_batch(z.view())
    }

    /// Fixed noise tensor for deterministic runs, keyed by this model's
    /// stream seed and the global sample indices. Entry `(l, i, :)` depends
    /// only on `(stream_seed, indices[i], l)`, never on batch composition.
    pub fn frozen_eps(&self, indices: &[usize], num_mc: usize) -> Array3<F> {
        let mut eps = Array3::zeros((num_mc, indices.len(), self.latent_dim()));
        for (pos, &i) in indices.iter().enumerate() {
            for l in 0..num_mc {
                let mut stream = rng::substream(
                    self.stream_seed,
                    &[rng::tags::FROZEN_EPS, i as u64, l as u64],
                );
                for d in 0..self.latent_dim() {
                    eps[[l, pos, d]] = rng::standard_normal(&mut stream);
                }
            }
        }
        eps
    }
}

fn clamp_logvar<F: Scalar>(lv: &mut Array2<F>) {
    let lo = F::from_f64(LOGVAR_MIN);
    let hi = F::from_f64(LOGVAR_MAX);
    lv.mapv_inplace(|v| v.max(lo).min(hi));
}
