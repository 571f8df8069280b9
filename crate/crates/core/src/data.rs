//! Datasets: synthetic generators, IDX image loading, normalization,
//! and stratified subsetting.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::rng::{self, tags};
use crate::scalar::Scalar;

/// Magic number of IDX files holding unsigned byte images `(n, rows, cols)`.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic number of IDX files holding unsigned byte labels `(n,)`.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("file truncated: need {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{extra} trailing bytes after IDX payload")]
    TrailingBytes { extra: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("class {class} has {available} points, need {needed}")]
    ClassTooSmall {
        class: usize,
        available: usize,
        needed: usize,
    },
    #[error("labels required but absent")]
    MissingLabels,
}

/// Feature matrix with optional integer labels, one row per point.
#[derive(Clone, Debug)]
pub struct Dataset<F> {
    pub features: Array2<F>,
    pub labels: Option<Vec<usize>>,
}

impl<F: Scalar> Dataset<F> {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> Result<&[usize], DataError> {
        self.labels.as_deref().ok_or(DataError::MissingLabels)
    }

    /// Rows (and labels) at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset<F> {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Interleaved crescent arcs with Gaussian noise.
///
/// Arc `a` draws an angle `theta ~ U[0, pi]` per point; even arcs place it
/// at `(1.1 a + cos theta, sin theta)`, odd arcs at
/// `(1.1 a + cos theta, 0.5 - sin theta)`, then add `N(0, sigma^2 I)`.
/// Points come in label blocks `0, .., arcs - 1`; `n` is split evenly with
/// the remainder going to the first arcs. Labels are the arc index.
pub fn half_moons<F: Scalar>(n: usize, arcs: usize, noise_sigma: f64, seed: u64) -> Dataset<F> {
    assert!(arcs > 0, "need at least one arc");
    let mut rng = rng::substream(seed, &[tags::DATA]);
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    let base = n / arcs;
    let remainder = n % arcs;
    let mut row = 0;
    for arc in 0..arcs {
        let count = base + usize::from(arc < remainder);
        let x_off = 1.1 * arc as f64;
        for _ in 0..count {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let nx: f64 = rng::standard_normal(&mut rng);
            let ny: f64 = rng::standard_normal(&mut rng);
            let (x, y) = if arc % 2 == 0 {
                (x_off + theta.cos(), theta.sin())
            } else {
                (x_off + theta.cos(), 0.5 - theta.sin())
            };
            features[[row, 0]] = F::from_f64(x + noise_sigma * nx);
            features[[row, 1]] = F::from_f64(y + noise_sigma * ny);
            labels.push(arc);
            row += 1;
        }
    }
    Dataset {
        features,
        labels: Some(labels),
    }
}

/// Isotropic Gaussian blobs around the given centers `(k, d)`.
///
/// Points come in label blocks like [`half_moons`], with the remainder of
/// `n` going to the first centers.
pub fn gaussian_blobs<F: Scalar>(
    n: usize,
    centers: ArrayView2<f64>,
    sigma: f64,
    seed: u64,
) -> Dataset<F> {
    let (k, d) = centers.dim();
    assert!(k > 0, "need at least one center");
    let mut rng = rng::substream(seed, &[tags::DATA]);
    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let base = n / k;
    let remainder = n % k;
    let mut row = 0;
    for c in 0..k {
        let count = base + usize::from(c < remainder);
        for _ in 0..count {
            for j in 0..d {
                let noise: f64 = rng::standard_normal(&mut rng);
                features[[row, j]] = F::from_f64(centers[[c, j]] + sigma * noise);
            }
            labels.push(c);
            row += 1;
        }
    }
    Dataset {
        features,
        labels: Some(labels),
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads IDX unsigned byte images as rows scaled to `[0, 1]` by `/ 255`.
pub fn load_idx_images<F: Scalar>(path: &Path) -> Result<Array2<F>, DataError> {
    let bytes = std::fs::read(path)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = read_u32_be(&bytes, 4)? as usize;
    let rows = read_u32_be(&bytes, 8)? as usize;
    let cols = read_u32_be(&bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes {
            extra: bytes.len() - expected,
        });
    }
    let scale = F::from_f64(1.0 / 255.0);
    let mut features = Array2::zeros((n, rows * cols));
    for (v, &b) in features.iter_mut().zip(&bytes[16..]) {
        *v = F::from_usize(b as usize) * scale;
    }
    Ok(features)
}

/// Loads IDX unsigned byte labels.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>, DataError> {
    let bytes = std::fs::read(path)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = read_u32_be(&bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes {
            extra: bytes.len() - expected,
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair as one labeled dataset.
pub fn load_idx_dataset<F: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<F>, DataError> {
    let features = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if features.nrows() != labels.len() {
        return Err(DataError::CountMismatch {
            images: features.nrows(),
            labels: labels.len(),
        });
    }
    Ok(Dataset {
        features,
        labels: Some(labels),
    })
}

/// Per-dimension range of a fitted min-max normalization; enough to map
/// both ways.
#[derive(Clone, Debug)]
pub struct MinMax<F> {
    pub lo: Array1<F>,
    pub hi: Array1<F>,
}

impl<F: Scalar> MinMax<F> {
    /// Learns per-dimension bounds from the rows of `x`.
    pub fn fit(x: ArrayView2<F>) -> MinMax<F> {
        let d = x.ncols();
        let mut lo = Array1::from_elem(d, F::infinity());
        let mut hi = Array1::from_elem(d, F::neg_infinity());
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v < lo[j] {
                    lo[j] = v;
                }
                if v > hi[j] {
                    hi[j] = v;
                }
            }
        }
        MinMax { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Maps each dimension to `[0, 1]`; constant dimensions map to `0.5`.
    pub fn normalize(&self, x: &mut Array2<F>) {
        assert_eq!(x.ncols(), self.dim(), "width mismatch");
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let range = self.hi[j] - self.lo[j];
                *v = if range > F::zero() {
                    (*v - self.lo[j]) / range
                } else {
                    F::half()
                };
            }
        }
    }

    /// Inverse of [`MinMax::normalize`]; constant dimensions map back to
    /// their single value.
    pub fn denormalize(&self, x: &mut Array2<F>) {
        assert_eq!(x.ncols(), self.dim(), "width mismatch");
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let range = self.hi[j] - self.lo[j];
                *v = if range > F::zero() {
                    self.lo[j] + *v * range
                } else {
                    self.lo[j]
                };
            }
        }
    }
}

/// Fits bounds on `x`, normalizes it in place, and returns the bounds.
pub fn normalize_minmax<F: Scalar>(x: &mut Array2<F>) -> MinMax<F> {
    let params = MinMax::fit(x.view());
    params.normalize(x);
    params
}

/// Indices of a stratified subset with `per_class` points from every
/// distinct label, drawn without replacement and returned sorted.
pub fn stratified_subset(
    labels: &[usize],
    per_class: usize,
    seed: u64,
) -> Result<Vec<usize>, DataError> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut picked = Vec::with_capacity(per_class * classes.len());
    for class in classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class).then_some(i))
            .collect();
        if members.len() < per_class {
            return Err(DataError::ClassTooSmall {
                class,
                available: members.len(),
                needed: per_class,
            });
        }
        let mut rng = rng::substream(seed, &[tags::SUBSET, class as u64]);
        for i in 0..per_class {
            let j = rng.random_range(i..members.len());
            members.swap(i, j);
        }
        picked.extend_from_slice(&members[..per_class]);
    }
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn half_moons_noiseless_geometry() {
        let ds = half_moons::<f64>(100, 3, 0.0, 5);
        let labels = ds.labels.as_ref().unwrap();
        assert_eq!(ds.len(), 100);
        // 100 = 34 + 33 + 33.
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 34);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 33);
        for (row, &label) in ds.features.rows().into_iter().zip(labels.iter()) {
            let x_off = 1.1 * label as f64;
            let (cy, y_sign_up) = if label % 2 == 0 { (0.0, true) } else { (0.5, false) };
            let dx = row[0] - x_off;
            let dy = row[1] - cy;
            let r = (dx * dx + dy * dy).sqrt();
            assert!((r - 1.0).abs() < 1e-9, "radius {r} for label {label}");
            if y_sign_up {
                assert!(row[1] >= -1e-9);
            } else {
                assert!(row[1] <= 0.5 + 1e-9);
            }
        }
    }

    #[test]
    fn half_moons_is_seeded_and_noise_scales() {
        let a = half_moons::<f64>(50, 2, 0.1, 9);
        let b = half_moons::<f64>(50, 2, 0.1, 9);
        assert_eq!(a.features, b.features);
        let c = half_moons::<f64>(50, 2, 0.1, 10);
        assert_ne!(a.features, c.features);
        // Noise displaces points off the unit arc by around sigma.
        let noisy = half_moons::<f64>(2000, 1, 0.05, 11);
        let mean_abs_dev: f64 = noisy
            .features
            .rows()
            .into_iter()
            .map(|row| {
                let r = (row[0] * row[0] + row[1] * row[1]).sqrt();
                (r - 1.0).abs()
            })
            .sum::<f64>()
            / 2000.0;
        assert!(mean_abs_dev > 0.01 && mean_abs_dev < 0.15, "{mean_abs_dev}");
    }

    #[test]
    fn blobs_center_on_their_centers() {
        let centers = ndarray::array![[0.0, 0.0], [10.0, -4.0]];
        let ds = gaussian_blobs::<f64>(1001, centers.view(), 0.5, 3);
        let labels = ds.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 501);
        for c in 0..2 {
            let rows: Vec<_> = ds
                .features
                .rows()
                .into_iter()
                .zip(labels.iter())
                .filter(|(_, &l)| l == c)
                .map(|(r, _)| r)
                .collect();
            for j in 0..2 {
                let mean: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
                assert!(
                    (mean - centers[[c, j]]).abs() < 0.1,
                    "component {c} dim {j}: {mean}"
                );
            }
        }
    }

    fn write_temp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn idx_round_trip_and_errors() {
        // Two 2x2 images with pixel values 0..8.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 51, 102, 153, 204, 255, 10, 20]);
        let f = write_temp(&bytes);
        let imgs = load_idx_images::<f64>(f.path()).unwrap();
        assert_eq!(imgs.dim(), (2, 4));
        assert!((imgs[[0, 1]] - 51.0 / 255.0).abs() < 1e-12);
        assert!((imgs[[1, 1]] - 1.0).abs() < 1e-12);

        let wrong = write_temp(&{
            let mut b = bytes.clone();
            b[3] = 0x01;
            b
        });
        assert!(matches!(
            load_idx_images::<f64>(wrong.path()),
            Err(DataError::BadMagic { found: 0x0801, .. })
        ));

        let short = write_temp(&bytes[..bytes.len() - 2]);
        assert!(matches!(
            load_idx_images::<f64>(short.path()),
            Err(DataError::Truncated { expected, found })
                if expected == bytes.len() && found == bytes.len() - 2
        ));

        let long = write_temp(&{
            let mut b = bytes.clone();
            b.push(7);
            b
        });
        assert!(matches!(
            load_idx_images::<f64>(long.path()),
            Err(DataError::TrailingBytes { extra: 1 })
        ));
    }

    #[test]
    fn idx_labels_and_pairing() {
        let mut img_bytes = Vec::new();
        img_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img_bytes.extend_from_slice(&3u32.to_be_bytes());
        img_bytes.extend_from_slice(&1u32.to_be_bytes());
        img_bytes.extend_from_slice(&1u32.to_be_bytes());
        img_bytes.extend_from_slice(&[1, 2, 3]);
        let imgs = write_temp(&img_bytes);

        let mut lab_bytes = Vec::new();
        lab_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab_bytes.extend_from_slice(&3u32.to_be_bytes());
        lab_bytes.extend_from_slice(&[7, 0, 7]);
        let labs = write_temp(&lab_bytes);

        let ds = load_idx_dataset::<f32>(imgs.path(), labs.path()).unwrap();
        assert_eq!(ds.labels.as_ref().unwrap(), &vec![7, 0, 7]);

        let mut short_lab = Vec::new();
        short_lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        short_lab.extend_from_slice(&2u32.to_be_bytes());
        short_lab.extend_from_slice(&[7, 0]);
        let labs2 = write_temp(&short_lab);
        assert!(matches!(
            load_idx_dataset::<f32>(imgs.path(), labs2.path()),
            Err(DataError::CountMismatch {
                images: 3,
                labels: 2
            })
        ));
    }

    #[test]
    fn minmax_normalizes_and_inverts() {
        let mut x: Array2<f64> =
            ndarray::array![[0.0, 5.0, 2.0], [10.0, 5.0, 4.0], [5.0, 5.0, 3.0]];
        let orig = x.clone();
        let params = normalize_minmax(&mut x);
        assert_eq!(x[[0, 0]], 0.0);
        assert_eq!(x[[1, 0]], 1.0);
        assert_eq!(x[[2, 0]], 0.5);
        // Constant dimension pins to 0.5.
        assert!(x.column(1).iter().all(|&v| v == 0.5));
        params.denormalize(&mut x);
        for (a, b) in x.iter().zip(orig.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stratified_subset_is_balanced_and_seeded() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let a = stratified_subset(&labels, 4, 1).unwrap();
        let b = stratified_subset(&labels, 4, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        for c in 0..3 {
            assert_eq!(a.iter().filter(|&&i| labels[i] == c).count(), 4);
        }
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(
            stratified_subset(&labels, 11, 1),
            Err(DataError::ClassTooSmall { .. })
        ));
    }
}
