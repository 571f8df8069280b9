//! Deep generative clustering with a mixture of variational autoencoders.
//!
//! The library trains one VAE per cluster with an EM loop: the M-step fits
//! each VAE on responsibility-weighted data, the E-step recomputes soft
//! assignments as a softmax over per-cluster evidence lower bounds. A
//! diagonal Gaussian mixture model is included as a classical baseline,
//! together with synthetic data generators, IDX image loading, and
//! clustering metrics (optimal-matching accuracy, normalized mutual
//! information).
//!
//! All numeric code is generic over the floating point type through
//! [`scalar::Scalar`]; `f32` aliases cover training workloads and `f64`
//! aliases cover verification and the GMM baseline.

pub mod data;
pub mod em;
pub mod gmm;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod vae;

pub use scalar::Scalar;

/// Multilayer perceptron in single precision, the training workhorse.
pub type Mlp32 = nn::Mlp<f32>;
/// Multilayer perceptron in double precision, used for verification.
pub type Mlp64 = nn::Mlp<f64>;
/// Variational autoencoder in single precision, the training workhorse.
pub type Vae32 = vae::Vae<f32>;
/// Variational autoencoder in double precision, used for verification.
pub type Vae64 = vae::Vae<f64>;
/// Diagonal Gaussian mixture in single precision.
pub type Gmm32 = gmm::Gmm<f32>;
/// Diagonal Gaussian mixture in double precision, the baseline default.
pub type Gmm64 = gmm::Gmm<f64>;
/// Dataset in single precision, the training workhorse.
pub type Dataset32 = data::Dataset<f32>;
/// Dataset in double precision, used for verification.
pub type Dataset64 = data::Dataset<f64>;
