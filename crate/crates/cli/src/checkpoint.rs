//! Binary run artifact: config snapshot, optional centering bounds,
//! per-cluster model parameters, final assignments, and history.
//!
//! Layout is self-describing and fully little-endian: a magic/version
//! header, then each section with explicit counts and shapes ahead of
//! its flat 32-bit arrays. Saving the same run twice produces the same
//! bytes, so reproducibility can be checked by file comparison.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mixvae::data::MinMax;
use mixvae::em::{EmConfig, EmRecord, TrainMode};
use mixvae::nn::{Layer, Mlp, OutputMode};
use mixvae::vae::Vae;
use ndarray::{Array1, Array2};

use crate::dataio::write_atomic;

const MAGIC: &[u8; 4] = b"MVCP";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub config: EmConfig,
    /// Present when training data went through min-max scaling; maps
    /// generated samples back to data coordinates.
    pub centering: Option<MinMax<f32>>,
    pub models: Vec<Vae<f32>>,
    pub assignments: Array2<f32>,
    pub history: Vec<EmRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
            .with_context(|| format!("writing checkpoint {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes)
            .with_context(|| format!("parsing checkpoint {}", path.display()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());

        let c = &self.config;
        push_u64(&mut w, c.num_clusters as u64);
        push_dims(&mut w, &c.encoder_dims);
        push_dims(&mut w, &c.decoder_dims);
        for v in [c.slope, c.dropout, c.beta, c.learning_rate, c.lr_decay] {
            push_f64(&mut w, v);
        }
        for v in [
            c.lr_decay_every,
            c.batch_size,
            c.num_mc_e,
            c.num_mc_m,
            c.epochs_per_m_step,
            c.iterations,
        ] {
            push_u64(&mut w, v as u64);
        }
        push_u64(&mut w, c.seed);
        w.push(match c.mode {
            TrainMode::Stochastic => 0,
            TrainMode::FullBatchFrozen => 1,
        });

        match &self.centering {
            None => w.push(0),
            Some(map) => {
                w.push(1);
                push_u64(&mut w, map.lo.len() as u64);
                push_f32s(&mut w, map.lo.iter());
                push_f32s(&mut w, map.hi.iter());
            }
        }

        push_u64(&mut w, self.models.len() as u64);
        for model in &self.models {
            push_u64(&mut w, model.stream_seed);
            for group in [
                model.trunk(),
                model.mean_head(),
                model.logvar_head(),
                model.decoder(),
            ] {
                push_u64(&mut w, group.layers.len() as u64);
                for layer in &group.layers {
                    push_u64(&mut w, layer.out_dim() as u64);
                    push_u64(&mut w, layer.in_dim() as u64);
                    push_f32s(&mut w, layer.weight.iter());
                    push_f32s(&mut w, layer.bias.iter());
                }
            }
        }

        push_u64(&mut w, self.assignments.nrows() as u64);
        push_u64(&mut w, self.assignments.ncols() as u64);
        push_f32s(&mut w, self.assignments.iter());

        push_u64(&mut w, self.history.len() as u64);
        for r in &self.history {
            push_u64(&mut w, r.iteration as u64);
            push_f64(&mut w, r.objective);
            push_f64(&mut w, r.mean_max_responsibility);
            match r.accuracy {
                Some(a) => {
                    w.push(1);
                    push_f64(&mut w, a);
                }
                None => {
                    w.push(0);
                    push_f64(&mut w, 0.0);
                }
            }
            push_f64(&mut w, r.learning_rate);
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            bail!("not a checkpoint file (magic {magic:02x?})");
        }
        let version = r.u32("version")?;
        if version != VERSION {
            bail!("unsupported checkpoint version {version}, expected {VERSION}");
        }

        let num_clusters = r.count("num_clusters")?;
        let encoder_dims = r.dims("encoder_dims")?;
        let decoder_dims = r.dims("decoder_dims")?;
        let slope = r.f64("leaky_relu_slope")?;
        let dropout = r.f64("dropout")?;
        let beta = r.f64("beta")?;
        let learning_rate = r.f64("learning_rate")?;
        let lr_decay = r.f64("lr_decay")?;
        let lr_decay_every = r.count("lr_decay_every")?;
        let batch_size = r.count("batch_size")?;
        let num_mc_e = r.count("num_mc_e")?;
        let num_mc_m = r.count("num_mc_m")?;
        let epochs_per_m_step = r.count("epochs_per_m_step")?;
        let iterations = r.count("iterations")?;
        let seed = r.u64("seed")?;
        let mode = match r.u8("train mode")? {
            0 => TrainMode::Stochastic,
            1 => TrainMode::FullBatchFrozen,
            m => bail!("unknown train mode byte {m}"),
        };
        let config = EmConfig {
            num_clusters,
            encoder_dims,
            decoder_dims,
            slope,
            dropout,
            beta,
            learning_rate,
            lr_decay,
            lr_decay_every,
            batch_size,
            num_mc_e,
            num_mc_m,
            epochs_per_m_step,
            iterations,
            seed,
            mode,
        };

        let centering = match r.u8("centering flag")? {
            0 => None,
            1 => {
                let dim = r.count("centering dim")?;
                let lo = Array1::from_vec(r.f32s(dim, "centering lower bounds")?);
                let hi = Array1::from_vec(r.f32s(dim, "centering upper bounds")?);
                Some(MinMax { lo, hi })
            }
            f => bail!("unknown centering flag {f}"),
        };

        let model_count = r.count("model count")?;
        if model_count == 0 {
            bail!("checkpoint holds no models");
        }
        if model_count != config.num_clusters {
            bail!(
                "config declares {} clusters but checkpoint holds {model_count} models",
                config.num_clusters
            );
        }
        let mut models = Vec::with_capacity(model_count);
        for m in 0..model_count {
            let stream_seed = r.u64("model stream seed")?;
            let mut groups = Vec::with_capacity(4);
            for (name, output) in [
                ("trunk", OutputMode::Activated),
                ("mean head", OutputMode::Linear),
                ("logvar head", OutputMode::Linear),
                ("decoder", OutputMode::Linear),
            ] {
                let n_layers = r.count("layer count")?;
                let mut layers = Vec::with_capacity(n_layers);
                for _ in 0..n_layers {
                    let out = r.count("layer rows")?;
                    let inp = r.count("layer cols")?;
                    let weight =
                        Array2::from_shape_vec((out, inp), r.f32s(out * inp, "layer weights")?)
                            .expect("sized above");
                    let bias = Array1::from_vec(r.f32s(out, "layer biases")?);
                    layers.push(Layer { weight, bias });
                }
                if layers.is_empty() {
                    bail!("model {m}: {name} has no layers");
                }
                groups.push(Mlp {
                    layers,
                    slope: slope as f32,
                    output,
                });
            }
            let decoder = groups.pop().expect("four groups");
            let logvar_head = groups.pop().expect("four groups");
            let mean_head = groups.pop().expect("four groups");
            let trunk = groups.pop().expect("four groups");
            let model = Vae::from_parts(
                trunk,
                mean_head,
                logvar_head,
                decoder,
                beta as f32,
                dropout as f32,
                stream_seed,
            )
            .with_context(|| format!("model {m} wiring"))?;
            if model.encoder_dims() != config.encoder_dims
                || model.decoder_dims() != config.decoder_dims
            {
                bail!(
                    "model {m} has dims {:?}/{:?} but config declares {:?}/{:?}",
                    model.encoder_dims(),
                    model.decoder_dims(),
                    config.encoder_dims,
                    config.decoder_dims
                );
            }
            models.push(model);
        }

        let n = r.count("assignment rows")?;
        let k = r.count("assignment cols")?;
        if k != config.num_clusters {
            bail!("assignments have {k} columns for {} clusters", config.num_clusters);
        }
        let assignments = Array2::from_shape_vec((n, k), r.f32s(n * k, "assignments")?)
            .expect("sized above");

        let records = r.count("history length")?;
        let mut history = Vec::with_capacity(records);
        for _ in 0..records {
            let iteration = r.count("history iteration")?;
            let objective = r.f64("history objective")?;
            let mean_max_responsibility = r.f64("history responsibility")?;
            let has_accuracy = r.u8("history accuracy flag")?;
            let accuracy_value = r.f64("history accuracy")?;
            let learning_rate = r.f64("history learning rate")?;
            history.push(EmRecord {
                iteration,
                objective,
                mean_max_responsibility,
                accuracy: (has_accuracy != 0).then_some(accuracy_value),
                learning_rate,
            });
        }

        r.done()?;
        Ok(Checkpoint {
            config,
            centering,
            models,
            assignments,
            history,
        })
    }
}

fn push_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn push_dims(w: &mut Vec<u8>, dims: &[usize]) {
    push_u64(w, dims.len() as u64);
    for &d in dims {
        push_u64(w, d as u64);
    }
}

fn push_f32s<'a>(w: &mut Vec<u8>, values: impl Iterator<Item = &'a f32>) {
    for v in values {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let Some(end) = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()) else {
            bail!("truncated at byte {} while reading {what}", self.pos);
        };
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).with_context(|| format!("{what} {v} does not fit in memory"))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(4 * n, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn dims(&mut self, what: &str) -> Result<Vec<usize>> {
        let n = self.count(what)?;
        if n > 64 {
            bail!("{what}: implausible layer count {n}");
        }
        (0..n).map(|_| self.count(what)).collect()
    }

    fn done(&self) -> Result<()> {
        let extra = self.buf.len() - self.pos;
        if extra > 0 {
            bail!("{extra} trailing bytes after checkpoint payload");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixvae::em;
    use ndarray::array;

    fn sample_checkpoint() -> Checkpoint {
        let mut config = EmConfig::synthetic_preset(2);
        config.encoder_dims = vec![3, 4, 2];
        config.decoder_dims = vec![2, 4, 3];
        config.seed = 9;
        let models = em::build_models::<f32>(&config).unwrap();
        Checkpoint {
            config,
            centering: Some(MinMax {
                lo: array![0.0f32, -1.5, 2.0],
                hi: array![1.0f32, 3.5, 2.0],
            }),
            models,
            assignments: array![[0.25f32, 0.75], [1.0, 0.0], [0.5, 0.5]],
            history: vec![
                EmRecord {
                    iteration: 1,
                    objective: -12.5,
                    mean_max_responsibility: 0.6,
                    accuracy: None,
                    learning_rate: 1e-4,
                },
                EmRecord {
                    iteration: 2,
                    objective: -13.0,
                    mean_max_responsibility: 0.7,
                    accuracy: Some(0.875),
                    learning_rate: 1e-4,
                },
            ],
        }
    }

    #[test]
    fn round_trip_preserves_bytes_and_content() {
        let original = sample_checkpoint();
        let bytes = original.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);

        assert_eq!(loaded.config, original.config);
        assert_eq!(loaded.history, original.history);
        assert_eq!(loaded.assignments, original.assignments);
        let map = loaded.centering.as_ref().unwrap();
        assert_eq!(map.lo, array![0.0f32, -1.5, 2.0]);
        assert_eq!(map.hi, array![1.0f32, 3.5, 2.0]);
        for (a, b) in loaded.models.iter().zip(original.models.iter()) {
            assert_eq!(a.stream_seed, b.stream_seed);
            for (ga, gb) in [
                (a.trunk(), b.trunk()),
                (a.mean_head(), b.mean_head()),
                (a.logvar_head(), b.logvar_head()),
                (a.decoder(), b.decoder()),
            ] {
                assert_eq!(ga.layers.len(), gb.layers.len());
                for (la, lb) in ga.layers.iter().zip(gb.layers.iter()) {
                    assert_eq!(la.weight, lb.weight);
                    assert_eq!(la.bias, lb.bias);
                }
            }
        }
    }

    #[test]
    fn save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.mvcp");
        let original = sample_checkpoint();
        original.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.to_bytes(), original.to_bytes());
    }

    #[test]
    fn rejects_corrupt_inputs() {
        let good = sample_checkpoint().to_bytes();

        let err = Checkpoint::from_bytes(&good[..10]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = Checkpoint::from_bytes(&bad_magic).unwrap_err().to_string();
        assert!(err.contains("not a checkpoint"), "{err}");

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        let err = Checkpoint::from_bytes(&bad_version).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        let mut trailing = good.clone();
        trailing.push(0);
        let err = Checkpoint::from_bytes(&trailing).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }
}
