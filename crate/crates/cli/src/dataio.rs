//! File formats for the command surface: CSV datasets, PGM sample
//! grids, and atomic writes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mixvae::data::{load_idx_dataset, Dataset};
use ndarray::{Array2, ArrayView2};

/// Writes `bytes` to `path` through a temp sibling and a rename, so a
/// crash never leaves a half-written file at the final path.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
        bail!("output path {} has no file name", path.display());
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

/// Header `x0,...,x{d-1}[,label]`, one row per point. Floats use the
/// shortest representation that parses back to the same value, so a
/// write/read cycle is exact.
pub fn write_csv(path: &Path, features: ArrayView2<f32>, labels: Option<&[usize]>) -> Result<()> {
    if let Some(labels) = labels {
        if labels.len() != features.nrows() {
            bail!(
                "{} labels for {} rows",
                labels.len(),
                features.nrows()
            );
        }
    }
    let d = features.ncols();
    let mut out = String::new();
    for j in 0..d {
        if j > 0 {
            out.push(',');
        }
        let _ = write!(out, "x{j}");
    }
    if labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, row) in features.rows().into_iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        if let Some(labels) = labels {
            let _ = write!(out, ",{}", labels[i]);
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a dataset written by [`write_csv`]. A final `label` column
/// becomes the labels; all other columns are features.
pub fn read_csv(path: &Path) -> Result<Dataset<f32>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        bail!("{}: empty file, expected a header row", path.display());
    };
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let labeled = columns.last() == Some(&"label");
    let d = columns.len() - usize::from(labeled);
    if d == 0 {
        bail!("{}: no feature columns in header `{header}`", path.display());
    }
    let mut values: Vec<f32> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut rows = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            bail!(
                "{} line {}: {} fields, header has {}",
                path.display(),
                idx + 1,
                fields.len(),
                columns.len()
            );
        }
        for field in &fields[..d] {
            let v: f32 = field.parse().with_context(|| {
                format!("{} line {}: invalid number `{field}`", path.display(), idx + 1)
            })?;
            values.push(v);
        }
        if labeled {
            let l: usize = fields[d].parse().with_context(|| {
                format!(
                    "{} line {}: invalid label `{}`",
                    path.display(),
                    idx + 1,
                    fields[d]
                )
            })?;
            labels.push(l);
        }
        rows += 1;
    }
    let features = Array2::from_shape_vec((rows, d), values).expect("counted shape");
    Ok(Dataset {
        features,
        labels: labeled.then_some(labels),
    })
}

/// Loads a dataset for a command: an IDX image/label pair when
/// `idx_labels` is given, otherwise a CSV file.
pub fn load_dataset(data: &Path, idx_labels: Option<&Path>) -> Result<Dataset<f32>> {
    match idx_labels {
        Some(labels) => load_idx_dataset(data, labels).with_context(|| {
            format!(
                "loading IDX pair {} / {}",
                data.display(),
                labels.display()
            )
        }),
        None => read_csv(data),
    }
}

/// Lays sample rows out as one binary PGM (P5, maxval 255) grid.
///
/// Each entry of `groups` is a `(count, side*side)` matrix drawn as one
/// grid row of `count` square tiles; pixel = clamp(round(255 * value)).
pub fn write_pgm_grid(path: &Path, groups: &[Array2<f32>], side: usize) -> Result<()> {
    let count = groups.first().map_or(0, |g| g.nrows());
    for g in groups {
        assert_eq!(g.nrows(), count, "ragged grid rows");
        assert_eq!(g.ncols(), side * side, "tile size mismatch");
    }
    let width = count * side;
    let height = groups.len() * side;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.reserve(width * height);
    for group in groups {
        for y in 0..side {
            for i in 0..count {
                let row = group.row(i);
                for x in 0..side {
                    let v = (row[y * side + x] * 255.0).round();
                    out.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    write_atomic(path, &out)
}

/// Side length when `dim` pixels form a square image.
pub fn square_side(dim: usize) -> Option<usize> {
    let side = (dim as f64).sqrt().round() as usize;
    (side * side == dim).then_some(side)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("points.csv");
        let features = array![[0.1f32, -2.5e-4], [1.0, 3.25], [f32::MIN_POSITIVE, 0.0]];
        write_csv(&path, features.view(), Some(&[0, 2, 1])).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x0,x1,label\n"), "{text}");
        let back = read_csv(&path).unwrap();
        assert_eq!(back.features, features);
        assert_eq!(back.labels.as_deref(), Some(&[0usize, 2, 1][..]));

        let unlabeled = dir.path().join("plain.csv");
        write_csv(&unlabeled, features.view(), None).unwrap();
        let back = read_csv(&unlabeled).unwrap();
        assert_eq!(back.features, features);
        assert_eq!(back.labels, None);
    }

    #[test]
    fn csv_reader_reports_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "x0,x1,label\n1.0,2.0\n").unwrap();
        let err = read_csv(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        fs::write(&path, "x0,x1\n1.0,abc\n").unwrap();
        let err = format!("{:#}", read_csv(&path).unwrap_err());
        assert!(err.contains("invalid number `abc`"), "{err}");
    }

    #[test]
    fn pgm_grid_layout_and_clamping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.pgm");
        // Two clusters, one 2x2 tile each; second tile tests clamping.
        let a = array![[0.0f32, 1.0, 0.5, 0.25]];
        let b = array![[-1.0f32, 2.0, 1.0, 0.0]];
        write_pgm_grid(&path, &[a, b], 2).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n2 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 255, 128, 64, 0, 255, 255, 0]);
    }

    #[test]
    fn pgm_grid_with_zero_samples_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.pgm");
        write_pgm_grid(&path, &[Array2::zeros((0, 4)), Array2::zeros((0, 4))], 2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"P5\n0 4\n255\n");
    }

    #[test]
    fn square_side_detects_squares() {
        assert_eq!(square_side(784), Some(28));
        assert_eq!(square_side(4), Some(2));
        assert_eq!(square_side(2), None);
        assert_eq!(square_side(10), None);
    }
}
