//! Diagonal covariance Gaussian mixture model fit by exact EM.
//!
//! The classical baseline: closed-form E and M steps, k-means++
//! initialization, and a variance floor against collapse. The mean
//! per-point log likelihood is recorded every iteration and is
//! non-decreasing up to floating point noise.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use thiserror::Error;

use crate::rng::{self, tags};
use crate::scalar::Scalar;

/// Lower bound applied to every variance after each M-step.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Component weight mass below which a component keeps its old
/// parameters instead of dividing by almost zero.
const EMPTY_COMPONENT_MASS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("need at least one component, got {0}")]
    NoComponents(usize),
    #[error("{points} points cannot seed {components} components")]
    TooFewPoints { points: usize, components: usize },
    #[error("data width {data} does not match model width {model}")]
    DimensionMismatch { data: usize, model: usize },
}

/// Mixture of axis-aligned Gaussians.
#[derive(Clone, Debug)]
pub struct Gmm<F> {
    /// Component weights, positive, summing to one. `(k,)`
    pub weights: Array1<F>,
    /// Component means. `(k, d)`
    pub means: Array2<F>,
    /// Per-dimension variances, floored. `(k, d)`
    pub variances: Array2<F>,
}

/// Result of [`Gmm::fit`].
#[derive(Clone, Debug)]
pub struct GmmFit<F> {
    pub model: Gmm<F>,
    /// Posterior responsibilities of the final model. `(n, k)`
    pub responsibilities: Array2<F>,
    /// Mean per-point log likelihood before each M-step, one entry per
    /// iteration, plus a final entry for the returned model.
    pub log_likelihood: Vec<f64>,
}

impl<F: Scalar> Gmm<F> {
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Log joint `log(pi_k) + log N(x; mu_k, diag(var_k))` for every
    /// component and row of `x`. `(n, k)`
    fn log_joint(&self, x: ArrayView2<F>) -> Array2<F> {
        let (k, d) = self.means.dim();
        let n = x.nrows();
        let ln_2pi = F::from_f64((2.0 * std::f64::consts::PI).ln());
        // Per-component constants: log pi_k - 0.5 * sum_j log(2 pi var_kj).
        let mut consts = Array1::zeros(k);
        for c in 0..k {
            let mut acc = F::zero();
            for j in 0..d {
                acc += ln_2pi + self.variances[[c, j]].ln();
            }
            consts[c] = self.weights[c].ln() - acc * F::half();
        }
        let mut out = Array2::zeros((n, k));
        for c in 0..k {
            let mean = self.means.row(c);
            let var = self.variances.row(c);
            Zip::from(out.column_mut(c))
                .and(x.rows())
                .for_each(|o, row| {
                    let mut q = F::zero();
                    for ((&xv, &m), &v) in row.iter().zip(mean.iter()).zip(var.iter()) {
                        let r = xv - m;
                        q += r * r / v;
                    }
                    *o = consts[c] - q * F::half();
                });
        }
        out
    }

    /// Log density of the mixture at one point.
    pub fn log_density(&self, x: ArrayView1<F>) -> F {
        assert_eq!(x.len(), self.dim(), "data width mismatch");
        let lj = self.log_joint(x.insert_axis(Axis(0)));
        logsumexp_row(lj.row(0))
    }

    /// Posterior responsibilities and the mean per-point log likelihood.
    pub fn e_step(&self, x: ArrayView2<F>) -> (Array2<F>, f64) {
        let lj = self.log_joint(x);
        let n = x.nrows();
        let mut resp = lj;
        let mut total = 0.0;
        for mut row in resp.rows_mut() {
            let lse = logsumexp_row(row.view());
            total += lse.to_f64();
            row.mapv_inplace(|v| (v - lse).exp());
        }
        (resp, total / n as f64)
    }

    /// Closed-form update of weights, means, and variances from
    /// responsibilities. Components with almost no mass are left as they
    /// are; every variance is floored.
    pub fn m_step(&mut self, x: ArrayView2<F>, resp: ArrayView2<F>) {
        let (n, k) = resp.dim();
        let d = self.dim();
        assert_eq!(x.nrows(), n, "row count mismatch");
        assert_eq!(k, self.num_components(), "component count mismatch");
        let floor = F::from_f64(VARIANCE_FLOOR);
        let mass = resp.sum_axis(Axis(0));
        let total: F = mass.sum();
        for c in 0..k {
            let nk = mass[c];
            self.weights[c] = nk / total;
            if nk.to_f64() < EMPTY_COMPONENT_MASS {
                continue;
            }
            let mut mean = Array1::<F>::zeros(d);
            for (row, &r) in x.rows().into_iter().zip(resp.column(c)) {
                Zip::from(&mut mean).and(row).for_each(|m, &xv| *m += r * xv);
            }
            mean /= nk;
            let mut var = Array1::<F>::zeros(d);
            for (row, &r) in x.rows().into_iter().zip(resp.column(c)) {
                Zip::from(&mut var).and(row).and(&mean).for_each(|v, &xv, &m| {
                    let diff = xv - m;
                    *v += r * diff * diff;
                });
            }
            var /= nk;
            var.mapv_inplace(|v| v.max(floor));
            self.means.row_mut(c).assign(&mean);
            self.variances.row_mut(c).assign(&var);
        }
    }

    /// Most probable component for one point.
    pub fn predict(&self, x: ArrayView1<F>) -> usize {
        assert_eq!(x.len(), self.dim(), "data width mismatch");
        let lj = self.log_joint(x.insert_axis(Axis(0)));
        argmax_row(lj.row(0))
    }

    /// Most probable component for every row.
    pub fn predict_batch(&self, x: ArrayView2<F>) -> Vec<usize> {
        assert_eq!(x.ncols(), self.dim(), "data width mismatch");
        let lj = self.log_joint(x);
        lj.rows().into_iter().map(|r| argmax_row(r)).collect()
    }

    /// Fits a mixture with `iterations` EM rounds.
    ///
    /// Means start from k-means++ seeding on the data, variances from the
    /// per-dimension data variance, weights uniform.
    pub fn fit(
        x: ArrayView2<F>,
        k: usize,
        iterations: usize,
        seed: u64,
    ) -> Result<GmmFit<F>, GmmError> {
        let (n, d) = x.dim();
        if k == 0 {
            return Err(GmmError::NoComponents(k));
        }
        if n < k {
            return Err(GmmError::TooFewPoints {
                points: n,
                components: k,
            });
        }
        let mut rng = rng::substream(seed, &[tags::GMM]);
        let seeds = kmeans_pp_seeds(x, k, &mut rng);
        let mut means = Array2::zeros((k, d));
        for (c, &i) in seeds.iter().enumerate() {
            means.row_mut(c).assign(&x.row(i));
        }
        let data_mean = x.sum_axis(Axis(0)) / F::from_usize(n);
        let mut data_var = Array1::<F>::zeros(d);
        for row in x.rows() {
            Zip::from(&mut data_var)
                .and(row)
                .and(&data_mean)
                .for_each(|v, &xv, &m| {
                    let diff = xv - m;
                    *v += diff * diff;
                });
        }
        data_var /= F::from_usize(n);
        data_var.mapv_inplace(|v| v.max(F::from_f64(VARIANCE_FLOOR)));
        let mut variances = Array2::zeros((k, d));
        for c in 0..k {
            variances.row_mut(c).assign(&data_var);
        }
        let mut model = Gmm {
            weights: Array1::from_elem(k, F::one() / F::from_usize(k)),
            means,
            variances,
        };
        let mut trace = Vec::with_capacity(iterations + 1);
        for _ in 0..iterations {
            let (r, ll) = model.e_step(x);
            trace.push(ll);
            model.m_step(x, r.view());
        }
        let (resp, final_ll) = model.e_step(x);
        trace.push(final_ll);
        Ok(GmmFit {
            model,
            responsibilities: resp,
            log_likelihood: trace,
        })
    }
}

/// k-means++ seeding: first center uniform, then each next point with
/// probability proportional to its squared distance to the closest chosen
/// center.
fn kmeans_pp_seeds<F: Scalar>(
    x: ArrayView2<F>,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let n = x.nrows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut best_sq = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = x.row(*chosen.last().unwrap());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mut sq = 0.0;
            for (&a, &b) in row.iter().zip(last.iter()) {
                let diff = (a - b).to_f64();
                sq += diff * diff;
            }
            if sq < best_sq[i] {
                best_sq[i] = sq;
            }
        }
        let total: f64 = best_sq.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best_sq.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // All points coincide with a chosen center.
            rng.random_range(0..n)
        };
        chosen.push(next);
    }
    chosen
}

fn logsumexp_row<F: Scalar>(row: ArrayView1<F>) -> F {
    let mut max = F::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let mut acc = F::zero();
    for &v in row {
        acc += (v - max).exp();
    }
    max + acc.ln()
}

fn argmax_row<F: Scalar>(row: ArrayView1<F>) -> usize {
    let mut best = 0;
    let mut best_v = F::neg_infinity();
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
