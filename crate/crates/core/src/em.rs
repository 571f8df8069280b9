//! EM training loop over per-cluster variational autoencoders.
//!
//! One VAE per cluster under fixed uniform mixing weights. Each iteration
//! first fits every VAE on responsibility-weighted data (M-step), then
//! recomputes the soft assignments as a row softmax over per-cluster ELBOs
//! (E-step). The tracked objective is
//! `-sum_{i,k} u[i,k] * elbo(k, i) + sum_{i,k} u[i,k] * ln u[i,k]`
//! with `0 * ln 0 = 0`.
//!
//! Every random decision is keyed by a per-model stream seed, so results
//! do not depend on thread scheduling and permuting the model slots
//! permutes the assignment columns identically.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::Dataset;
use crate::metrics::clustering_accuracy;
use crate::rng::{self, tags};
use crate::scalar::Scalar;
use crate::vae::{Vae, VaeAdam, VaeError};

/// A cluster whose best responsibility over all points falls below this is
/// reported as empty.
pub const EMPTY_CLUSTER_RESPONSIBILITY: f64 = 1e-3;

/// Step-size halvings before a full-batch update gives up for the epoch.
const MAX_BACKTRACKS: usize = 40;

#[derive(Debug, Error)]
pub enum EmError {
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error("ELBO for point {point} under cluster {cluster} is not finite")]
    NonFiniteElbo { point: usize, cluster: usize },
    #[error("{points} points cannot fill {clusters} clusters")]
    TooFewPoints { points: usize, clusters: usize },
    #[error("data has dimension {data}, cluster {cluster} expects {model}")]
    DataDimMismatch {
        data: usize,
        cluster: usize,
        model: usize,
    },
    #[error("{models} models for {clusters} configured clusters")]
    ModelCount { models: usize, clusters: usize },
    #[error("assignments are {rows}x{cols}, expected {n}x{k}")]
    AssignmentShape {
        rows: usize,
        cols: usize,
        n: usize,
        k: usize,
    },
    #[error("assignment row {row} is off the probability simplex")]
    OffSimplex { row: usize },
    #[error("{labels} labels for {points} points")]
    LabelCount { labels: usize, points: usize },
    #[error("cluster {cluster} out of range for {clusters} clusters")]
    ClusterOutOfRange { cluster: usize, clusters: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}

/// How the M-step updates each model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Minibatch Adam with fresh noise and dropout. The production mode.
    Stochastic,
    /// Full-batch gradient descent on noise frozen per (model, point,
    /// draw), with backtracking that keeps a step only if the weighted
    /// loss does not increase. Every quantity is deterministic, so the
    /// objective trace is non-increasing; used for verification.
    FullBatchFrozen,
}

/// Architecture and schedule for one EM run.
#[derive(Clone, Debug, PartialEq)]
pub struct EmConfig {
    pub num_clusters: usize,
    /// `[data, hidden.., latent]`.
    pub encoder_dims: Vec<usize>,
    /// `[latent, hidden.., data]`.
    pub decoder_dims: Vec<usize>,
    pub slope: f64,
    pub dropout: f64,
    /// Weight on the reconstruction term of every ELBO.
    pub beta: f64,
    pub learning_rate: f64,
    /// Multiplicative decay factor; 1.0 disables decay.
    pub lr_decay: f64,
    /// EM iterations between decays; 0 disables decay.
    pub lr_decay_every: usize,
    pub batch_size: usize,
    /// Monte Carlo draws per ELBO when scoring (E-step, objective).
    pub num_mc_e: usize,
    /// Monte Carlo draws per ELBO gradient in the M-step.
    pub num_mc_m: usize,
    pub epochs_per_m_step: usize,
    pub iterations: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl EmConfig {
    /// Hyperparameters for 28x28 grayscale image datasets such as MNIST.
    pub fn mnist_preset() -> EmConfig {
        EmConfig {
            num_clusters: 10,
            encoder_dims: vec![784, 500, 20],
            decoder_dims: vec![20, 500, 784],
            slope: 0.2,
            dropout: 0.2,
            beta: 1.0,
            learning_rate: 1e-3,
            lr_decay: 0.9,
            lr_decay_every: 20,
            batch_size: 256,
            num_mc_e: 10,
            num_mc_m: 1,
            epochs_per_m_step: 20,
            iterations: 300,
            seed: 0,
            mode: TrainMode::Stochastic,
        }
    }

    /// Hyperparameters for two-dimensional synthetic datasets.
    pub fn synthetic_preset(num_clusters: usize) -> EmConfig {
        EmConfig {
            num_clusters,
            encoder_dims: vec![2, 100, 2],
            decoder_dims: vec![2, 100, 2],
            slope: 0.2,
            dropout: 0.0,
            beta: 5.0,
            learning_rate: 1e-4,
            lr_decay: 1.0,
            lr_decay_every: 0,
            batch_size: 256,
            num_mc_e: 10,
            num_mc_m: 1,
            epochs_per_m_step: 5,
            iterations: 1000,
            seed: 0,
            mode: TrainMode::Stochastic,
        }
    }

    /// Learning rate in effect at 1-indexed EM iteration `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.learning_rate;
        }
        let steps = (iteration.max(1) - 1) / self.lr_decay_every;
        self.learning_rate * self.lr_decay.powi(steps as i32)
    }

    /// Checks the schedule and the fit to `n` points of dimension `dim`.
    pub fn validate(&self, n: usize, dim: usize) -> Result<(), EmError> {
        if self.num_clusters == 0 {
            return Err(EmError::InvalidConfig("num_clusters must be positive"));
        }
        if n < self.num_clusters {
            return Err(EmError::TooFewPoints {
                points: n,
                clusters: self.num_clusters,
            });
        }
        if self.encoder_dims.first() != Some(&dim) || self.decoder_dims.last() != Some(&dim) {
            return Err(EmError::InvalidConfig(
                "encoder input and decoder output must match the data dimension",
            ));
        }
        if self.batch_size == 0 {
            return Err(EmError::InvalidConfig("batch_size must be positive"));
        }
        if self.num_mc_e == 0 || self.num_mc_m == 0 {
            return Err(EmError::InvalidConfig(
                "Monte Carlo draw counts must be positive",
            ));
        }
        if self.epochs_per_m_step == 0 {
            return Err(EmError::InvalidConfig("epochs_per_m_step must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(EmError::InvalidConfig("learning_rate must be positive"));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(EmError::InvalidConfig("lr_decay must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EmError::InvalidConfig("dropout must lie in [0, 1)"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(EmError::InvalidConfig("beta must be positive"));
        }
        Ok(())
    }
}

/// One completed EM iteration, as recorded in the run history.
#[derive(Clone, Debug, PartialEq)]
pub struct EmRecord {
    /// 1-indexed EM iteration.
    pub iteration: usize,
    pub objective: f64,
    /// Mean over points of the largest responsibility; 1.0 means hard
    /// assignments.
    pub mean_max_responsibility: f64,
    /// Optimal-matching accuracy against dataset labels, when present.
    pub accuracy: Option<f64>,
    pub learning_rate: f64,
}

/// Trained models with their final soft assignments and history.
#[derive(Clone, Debug)]
pub struct EmFit<F> {
    pub models: Vec<Vae<F>>,
    /// `(n, k)`, row-stochastic.
    pub assignments: Array2<F>,
    pub history: Vec<EmRecord>,
}

/// Random row-stochastic matrix, each row uniform on the simplex
/// (symmetric Dirichlet with unit concentration, via normalized
/// exponentials).
pub fn init_assignments<F: Scalar>(n: usize, k: usize, seed: u64) -> Array2<F> {
    assert!(n > 0 && k > 0, "need at least one row and one cluster");
    let mut stream = rng::substream(seed, &[tags::INIT_ASSIGN]);
    let mut u = Array2::zeros((n, k));
    let mut draws = vec![0.0f64; k];
    for i in 0..n {
        let mut total = 0.0;
        for d in draws.iter_mut() {
            *d = stream.sample::<f64, _>(rand_distr::Exp1);
            total += *d;
        }
        for (j, &d) in draws.iter().enumerate() {
            u[[i, j]] = F::from_f64(d / total);
        }
    }
    u
}

/// One model per cluster, fully determined by `config.seed`: slot `k`
/// derives its own stream seed, and its parameters are drawn from that
/// seed's init stream.
pub fn build_models<F: Scalar>(config: &EmConfig) -> Result<Vec<Vae<F>>, EmError> {
    (0..config.num_clusters)
        .map(|k| {
            let stream_seed = rng::derive_key(config.seed, &[tags::INIT_PARAMS, k as u64]);
            let mut stream = rng::substream(stream_seed, &[tags::INIT_PARAMS]);
            Vae::new(
                &config.encoder_dims,
                &config.decoder_dims,
                F::from_f64(config.slope),
                F::from_f64(config.dropout),
                F::from_f64(config.beta),
                stream_seed,
                &mut stream,
            )
            .map_err(EmError::from)
        })
        .collect()
}

fn assemble_elbo_matrix<F: Scalar>(
    columns: Vec<Array1<F>>,
    n: usize,
) -> Result<Array2<F>, EmError> {
    let mut elbos = Array2::zeros((n, columns.len()));
    for (k, col) in columns.iter().enumerate() {
        for (i, &e) in col.iter().enumerate() {
            if !e.is_finite() {
                return Err(EmError::NonFiniteElbo {
                    point: i,
                    cluster: k,
                });
            }
            elbos[[i, k]] = e;
        }
    }
    Ok(elbos)
}

fn elbo_matrix_tagged<F: Scalar>(
    models: &[Vae<F>],
    x: ArrayView2<F>,
    num_mc: usize,
    tag: u64,
    round: u64,
) -> Result<Array2<F>, EmError> {
    assert!(!models.is_empty(), "need at least one model");
    let columns: Vec<Array1<F>> = models
        .par_iter()
        .map(|m| {
            let mut stream = rng::substream(m.stream_seed, &[tag, round]);
            m.elbo_batch(x, num_mc, &mut stream)
        })
        .collect();
    assemble_elbo_matrix(columns, x.nrows())
}

/// `(n, k)` matrix of Monte Carlo ELBOs, one column per model. Noise for
/// column `k` comes from model `k`'s scoring stream keyed by `round`, so
/// adding or reordering models never perturbs other columns.
pub fn elbo_matrix<F: Scalar>(
    models: &[Vae<F>],
    x: ArrayView2<F>,
    num_mc: usize,
    round: u64,
) -> Result<Array2<F>, EmError> {
    elbo_matrix_tagged(models, x, num_mc, tags::E_STEP, round)
}

/// [`elbo_matrix`] with fixed noise, one `(num_mc, n, latent)` block per
/// model.
pub fn elbo_matrix_with_eps<F: Scalar>(
    models: &[Vae<F>],
    x: ArrayView2<F>,
    eps: &[Array3<F>],
) -> Result<Array2<F>, EmError> {
    assert!(!models.is_empty(), "need at least one model");
    assert_eq!(models.len(), eps.len(), "one noise block per model");
    let columns: Vec<Array1<F>> = models
        .par_iter()
        .zip(eps)
        .map(|(m, e)| m.elbo_batch_with_eps(x, e.view()))
        .collect();
    assemble_elbo_matrix(columns, x.nrows())
}

/// Row softmax with max subtraction. Each output row is the exact
/// minimizer of `-sum_k u_k * e_k + sum_k u_k * ln u_k` over the simplex.
pub fn responsibilities_from_elbos<F: Scalar>(elbos: ArrayView2<F>) -> Array2<F> {
    let mut u = elbos.to_owned();
    for mut row in u.rows_mut() {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|e| (e - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    u
}

/// Soft assignments for every point: the row softmax of [`elbo_matrix`].
pub fn e_step<F: Scalar>(
    models: &[Vae<F>],
    x: ArrayView2<F>,
    num_mc: usize,
    round: u64,
) -> Result<Array2<F>, EmError> {
    let elbos = elbo_matrix(models, x, num_mc, round)?;
    Ok(responsibilities_from_elbos(elbos.view()))
}

/// One M-step: for every cluster independently, `epochs_per_m_step` epochs
/// of shuffled minibatch Adam on the loss `-sum_i u[i,k] * elbo(k, i)`.
/// Dropout and fresh noise are on. A batch with a non-finite loss or
/// gradient is reported and skipped. `round` keys this step's noise; pass
/// the EM iteration.
pub fn m_step<F: Scalar>(
    models: &mut [Vae<F>],
    optimizers: &mut [VaeAdam<F>],
    x: ArrayView2<F>,
    u: ArrayView2<F>,
    lr: f64,
    config: &EmConfig,
    round: u64,
) {
    assert_eq!(models.len(), optimizers.len(), "one optimizer per model");
    assert_eq!(u.dim(), (x.nrows(), models.len()), "assignment shape");
    let n = x.nrows();
    models
        .par_iter_mut()
        .zip(optimizers.par_iter_mut())
        .enumerate()
        .for_each(|(k, (vae, adam))| {
            let mut stream = rng::substream(vae.stream_seed, &[tags::M_STEP, round]);
            let mut order: Vec<usize> = (0..n).collect();
            for _ in 0..config.epochs_per_m_step {
                order.shuffle(&mut stream);
                for batch in order.chunks(config.batch_size) {
                    let xb = x.select(Axis(0), batch);
                    let wb: Array1<F> = batch.iter().map(|&i| u[[i, k]]).collect();
                    match vae.weighted_elbo_grad(xb.view(), wb.view(), config.num_mc_m, &mut stream)
                    {
                        Ok((grads, _)) => {
                            if adam.step(vae, &grads, F::from_f64(lr)).is_err() {
                                log::warn!("cluster {k}: non-finite gradient, batch skipped");
                            }
                        }
                        Err(err) => log::warn!("cluster {k}: {err}, batch skipped"),
                    }
                }
            }
        });
}

/// One deterministic M-step: full-batch gradient descent per cluster on
/// the fixed noise in `eps`, with backtracking. A step is kept only if the
/// weighted loss, evaluated exactly as the scoring path evaluates it, does
/// not increase; otherwise the trial step is halved, and after
/// [`MAX_BACKTRACKS`] halvings the parameters stay put.
pub fn m_step_frozen<F: Scalar>(
    models: &mut [Vae<F>],
    x: ArrayView2<F>,
    u: ArrayView2<F>,
    lr: f64,
    epochs: usize,
    eps: &[Array3<F>],
) {
    assert_eq!(models.len(), eps.len(), "one noise block per model");
    assert_eq!(u.dim(), (x.nrows(), models.len()), "assignment shape");
    models.par_iter_mut().enumerate().for_each(|(k, vae)| {
        for _ in 0..epochs {
            let w = u.column(k);
            let base_loss = vae.weighted_loss_with_eps(x, w, eps[k].view());
            let grads = match vae.weighted_elbo_grad_with_eps(x, w, eps[k].view()) {
                Ok((grads, _)) => grads,
                Err(err) => {
                    log::warn!("cluster {k}: {err}, update abandoned");
                    return;
                }
            };
            let base = vae.clone();
            let mut step = lr;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACKS {
                vae.add_scaled_grads(&grads, F::from_f64(-step));
                let trial_loss = vae.weighted_loss_with_eps(x, w, eps[k].view());
                if trial_loss.is_finite() && trial_loss <= base_loss {
                    accepted = true;
                    break;
                }
                *vae = base.clone();
                step *= 0.5;
            }
            if !accepted {
                // Gradient and loss would repeat unchanged; stop early.
                log::debug!("cluster {k}: no non-increasing step found, parameters kept");
                *vae = base;
                return;
            }
        }
    });
}

/// Objective value from a precomputed ELBO matrix, accumulated in `f64`:
/// `-sum u * elbo + sum u * ln u` with `0 * ln 0 = 0`.
pub fn em_objective_from_elbos<F: Scalar>(elbos: ArrayView2<F>, u: ArrayView2<F>) -> f64 {
    assert_eq!(elbos.dim(), u.dim(), "shape mismatch");
    let mut acc = 0.0f64;
    for (&e, &w) in elbos.iter().zip(u.iter()) {
        let w = w.to_f64();
        if w > 0.0 {
            acc += w * (w.ln() - e.to_f64());
        }
    }
    acc
}

/// Monte Carlo estimate of the EM objective under the given assignments.
pub fn em_objective<F: Scalar>(
    models: &[Vae<F>],
    x: ArrayView2<F>,
    u: ArrayView2<F>,
    num_mc: usize,
    round: u64,
) -> Result<f64, EmError> {
    let elbos = elbo_matrix(models, x, num_mc, round)?;
    Ok(em_objective_from_elbos(elbos.view(), u))
}

fn argmax_row<F: Scalar>(row: ArrayView1<F>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Hard labels: per-row argmax, ties to the lowest index.
pub fn hard_labels<F: Scalar>(u: ArrayView2<F>) -> Vec<usize> {
    u.rows().into_iter().map(argmax_row).collect()
}

fn warn_empty_clusters<F: Scalar>(u: ArrayView2<F>, iteration: usize) {
    for (k, col) in u.columns().into_iter().enumerate() {
        let max = col.iter().copied().fold(F::neg_infinity(), F::max).to_f64();
        if max < EMPTY_CLUSTER_RESPONSIBILITY {
            log::warn!(
                "cluster {k} is empty at iteration {iteration} (max responsibility {max:.2e})"
            );
        }
    }
}

/// Runs the full EM loop from a fresh seeded initialization.
pub fn fit<F: Scalar>(config: &EmConfig, data: &Dataset<F>) -> Result<EmFit<F>, EmError> {
    config.validate(data.len(), data.dim())?;
    let models = build_models(config)?;
    let u0 = init_assignments(data.len(), config.num_clusters, config.seed);
    fit_from(config, data, models, u0)
}

/// Runs the EM loop from the given models and initial assignments.
///
/// Each iteration updates models with the assignments of the previous one,
/// then refreshes the assignments, and records one history entry. All
/// noise is keyed by the per-model stream seeds and the iteration number.
pub fn fit_from<F: Scalar>(
    config: &EmConfig,
    data: &Dataset<F>,
    models: Vec<Vae<F>>,
    u0: Array2<F>,
) -> Result<EmFit<F>, EmError> {
    let x = data.features.view();
    let n = x.nrows();
    config.validate(n, x.ncols())?;
    if models.len() != config.num_clusters {
        return Err(EmError::ModelCount {
            models: models.len(),
            clusters: config.num_clusters,
        });
    }
    for (k, m) in models.iter().enumerate() {
        if m.data_dim() != x.ncols() {
            return Err(EmError::DataDimMismatch {
                data: x.ncols(),
                cluster: k,
                model: m.data_dim(),
            });
        }
    }
    if u0.dim() != (n, models.len()) {
        return Err(EmError::AssignmentShape {
            rows: u0.nrows(),
            cols: u0.ncols(),
            n,
            k: models.len(),
        });
    }
    for (i, row) in u0.rows().into_iter().enumerate() {
        let sum = row.iter().map(|&v| v.to_f64()).sum::<f64>();
        if (sum - 1.0).abs() > 1e-4 || row.iter().any(|v| *v < F::zero()) {
            return Err(EmError::OffSimplex { row: i });
        }
    }
    if let Some(labels) = &data.labels {
        if labels.len() != n {
            return Err(EmError::LabelCount {
                labels: labels.len(),
                points: n,
            });
        }
    }

    let mut models = models;
    let mut optimizers: Vec<VaeAdam<F>> = models.iter().map(VaeAdam::new).collect();
    let mut u = u0;
    let frozen: Vec<Array3<F>> = match config.mode {
        TrainMode::FullBatchFrozen => {
            let all: Vec<usize> = (0..n).collect();
            models
                .iter()
                .map(|m| m.frozen_eps(&all, config.num_mc_e))
                .collect()
        }
        TrainMode::Stochastic => Vec::new(),
    };

    let mut history = Vec::with_capacity(config.iterations);
    for iteration in 1..=config.iterations {
        let lr = config.lr_at(iteration);
        match config.mode {
            TrainMode::Stochastic => m_step(
                &mut models,
                &mut optimizers,
                x,
                u.view(),
                lr,
                config,
                iteration as u64,
            ),
            TrainMode::FullBatchFrozen => m_step_frozen(
                &mut models,
                x,
                u.view(),
                lr,
                config.epochs_per_m_step,
                &frozen,
            ),
        }
        let elbos = match config.mode {
            TrainMode::Stochastic => elbo_matrix(&models, x, config.num_mc_e, iteration as u64)?,
            TrainMode::FullBatchFrozen => elbo_matrix_with_eps(&models, x, &frozen)?,
        };
        u = responsibilities_from_elbos(elbos.view());
        warn_empty_clusters(u.view(), iteration);
        let objective = em_objective_from_elbos(elbos.view(), u.view());
        let mean_max = u
            .rows()
            .into_iter()
            .map(|r| r.iter().copied().fold(F::neg_infinity(), F::max).to_f64())
            .sum::<f64>()
            / n as f64;
        let accuracy = data
            .labels
            .as_ref()
            .map(|labels| clustering_accuracy(&hard_labels(u.view()), labels).expect("lengths match"));
        match accuracy {
            Some(acc) => log::info!(
                "iteration {iteration}/{}: objective {objective:.4} accuracy {acc:.4}",
                config.iterations
            ),
            None => log::info!(
                "iteration {iteration}/{}: objective {objective:.4}",
                config.iterations
            ),
        }
        history.push(EmRecord {
            iteration,
            objective,
            mean_max_responsibility: mean_max,
            accuracy,
            learning_rate: lr,
        });
    }
    Ok(EmFit {
        models,
        assignments: u,
        history,
    })
}

/// Cluster label and responsibilities for one point. Ties break to the
/// lowest index. `seed` keys the Monte Carlo noise.
pub fn assign<F: Scalar>(
    models: &[Vae<F>],
    x: ArrayView1<F>,
    num_mc: usize,
    seed: u64,
) -> Result<(usize, Array1<F>), EmError> {
    let (labels, resp) = assign_batch(models, x.insert_axis(Axis(0)), num_mc, seed)?;
    Ok((labels[0], resp.row(0).to_owned()))
}

/// [`assign`] over many points at once.
pub fn assign_batch<F: Scalar>(
    models: &[Vae<F>],
    x: ArrayView2<F>,
    num_mc: usize,
    seed: u64,
) -> Result<(Vec<usize>, Array2<F>), EmError> {
    let elbos = elbo_matrix_tagged(models, x, num_mc, tags::ASSIGN, seed)?;
    let u = responsibilities_from_elbos(elbos.view());
    Ok((hard_labels(u.view()), u))
}

/// Decodes `count` fresh latent draws from the chosen cluster's model.
pub fn generate<F: Scalar>(
    models: &[Vae<F>],
    cluster: usize,
    count: usize,
    seed: u64,
) -> Result<Array2<F>, EmError> {
    let Some(model) = models.get(cluster) else {
        return Err(EmError::ClusterOutOfRange {
            cluster,
            clusters: models.len(),
        });
    };
    let mut stream = rng::substream(model.stream_seed, &[tags::GENERATE, seed]);
    Ok(model.sample(count, &mut stream))
}
