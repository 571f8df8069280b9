//! The five commands behind the binary: dataset generation, training,
//! evaluation, sample generation, and the GMM baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use mixvae::data::{gaussian_blobs, half_moons, Dataset, MinMax};
use mixvae::em::{self, EmRecord};
use mixvae::gmm::Gmm;
use mixvae::metrics::{clustering_accuracy, nmi};
use ndarray::{Array1, Array2, Axis};

use crate::checkpoint::Checkpoint;
use crate::config::load_config;
use crate::dataio::{load_dataset, square_side, write_atomic, write_csv, write_pgm_grid};

/// Per-dimension midpoint of fitted bounds, the shift applied to CSV
/// features before training and undone on generated samples.
fn midpoint(bounds: &MinMax<f32>) -> Array1<f32> {
    (&bounds.lo + &bounds.hi) * 0.5
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DataKind {
    HalfMoons,
    Blobs,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Dataset family to generate.
    #[arg(long, value_enum)]
    pub kind: DataKind,
    /// Total number of points (half-moons).
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    /// Number of arcs (half-moons).
    #[arg(long, default_value_t = 5)]
    pub arcs: usize,
    /// Noise standard deviation around the arcs (half-moons).
    #[arg(long, default_value_t = 0.05)]
    pub noise_sigma: f64,
    /// Points per center (blobs).
    #[arg(long)]
    pub n_per: Option<usize>,
    /// Centers as `x,y;x,y;...` (blobs).
    #[arg(long)]
    pub centers: Option<String>,
    /// Standard deviation around each center (blobs).
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
}

pub fn gen_data(args: &GenDataArgs, seed: u64, out: &Path) -> Result<()> {
    let dataset: Dataset<f32> = match args.kind {
        DataKind::HalfMoons => half_moons(args.n, args.arcs, args.noise_sigma, seed),
        DataKind::Blobs => {
            let n_per = args.n_per.context("blobs need --n-per <count>")?;
            let centers = parse_centers(
                args.centers.as_deref().context("blobs need --centers `x,y;x,y;...`")?,
            )?;
            gaussian_blobs(n_per * centers.nrows(), centers.view(), args.sigma, seed)
        }
    };
    write_csv(out, dataset.features.view(), dataset.labels.as_deref())?;
    println!(
        "wrote {} points of dimension {} to {}",
        dataset.len(),
        dataset.dim(),
        out.display()
    );
    Ok(())
}

fn parse_centers(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, part) in text.split(';').enumerate() {
        let row: Vec<f64> = part
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .with_context(|| format!("center {}: invalid coordinate `{v}`", i + 1))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                bail!(
                    "center {} has {} coordinates, expected {}",
                    i + 1,
                    row.len(),
                    first.len()
                );
            }
        }
        rows.push(row);
    }
    let d = rows[0].len();
    let flat: Vec<f64> = rows.concat();
    Ok(Array2::from_shape_vec((flat.len() / d, d), flat).expect("rectangular rows"))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training data: a CSV file, or an IDX image file when --labels is given.
    #[arg(long)]
    pub data: PathBuf,
    /// IDX label file paired with --data.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

pub fn train(config_path: &Path, args: &TrainArgs, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let mut dataset = load_dataset(&args.data, args.labels.as_deref())?;
    // CSV features keep their scale but are shifted so the bounding box
    // is centered on the origin, where fresh decoders start; IDX pixels
    // stay as loaded.
    let centering = match args.labels {
        None => {
            let bounds = MinMax::fit(dataset.features.view());
            let mid = midpoint(&bounds);
            for mut row in dataset.features.rows_mut() {
                row -= &mid;
            }
            Some(bounds)
        }
        Some(_) => None,
    };

    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let start = Instant::now();
    let fit = em::fit(&config, &dataset)?;
    let elapsed = start.elapsed().as_secs_f64();

    let checkpoint = Checkpoint {
        config: config.clone(),
        centering,
        models: fit.models,
        assignments: fit.assignments,
        history: fit.history,
    };
    checkpoint.save(&out_dir.join("checkpoint.mvcp"))?;
    write_atomic(
        &out_dir.join("history.csv"),
        history_csv(&checkpoint.history).as_bytes(),
    )?;

    let last = checkpoint.history.last().expect("at least one iteration");
    let mut manifest = String::new();
    let _ = writeln!(manifest, "dataset = {}", args.data.display());
    if let Some(labels) = &args.labels {
        let _ = writeln!(manifest, "label_file = {}", labels.display());
    }
    let _ = writeln!(manifest, "points = {}", dataset.len());
    let _ = writeln!(manifest, "dimensions = {}", dataset.dim());
    let _ = writeln!(manifest, "clusters = {}", config.num_clusters);
    let _ = writeln!(manifest, "seed = {}", config.seed);
    let _ = writeln!(manifest, "iterations = {}", config.iterations);
    let _ = writeln!(manifest, "centered = {}", checkpoint.centering.is_some());
    let _ = writeln!(manifest, "wall_clock_seconds = {elapsed:.3}");
    let _ = writeln!(
        manifest,
        "seconds_per_iteration = {:.3}",
        elapsed / config.iterations as f64
    );
    let _ = writeln!(manifest, "final_objective = {}", last.objective);
    let _ = writeln!(
        manifest,
        "final_mean_max_responsibility = {}",
        last.mean_max_responsibility
    );
    if let Some(acc) = last.accuracy {
        let _ = writeln!(manifest, "final_accuracy = {acc}");
    }
    write_atomic(&out_dir.join("run_manifest.txt"), manifest.as_bytes())?;

    match last.accuracy {
        Some(acc) => println!(
            "trained {} clusters for {} iterations in {elapsed:.1}s; final objective {:.4}, accuracy {acc:.4}",
            config.num_clusters, config.iterations, last.objective
        ),
        None => println!(
            "trained {} clusters for {} iterations in {elapsed:.1}s; final objective {:.4}",
            config.num_clusters, config.iterations, last.objective
        ),
    }
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn history_csv(history: &[EmRecord]) -> String {
    let mut out =
        String::from("iteration,objective,mean_max_responsibility,accuracy,learning_rate\n");
    for r in history {
        let _ = write!(
            out,
            "{},{},{},",
            r.iteration, r.objective, r.mean_max_responsibility
        );
        if let Some(acc) = r.accuracy {
            let _ = write!(out, "{acc}");
        }
        let _ = writeln!(out, ",{}", r.learning_rate);
    }
    out
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained model artifact from `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled data: a CSV file, or an IDX image file when --labels is given.
    #[arg(long)]
    pub data: PathBuf,
    /// IDX label file paired with --data.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Assignment runs to aggregate; run r uses seed + r.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Monte Carlo draws per score (default: the checkpoint's E-step count).
    #[arg(long)]
    pub num_mc: Option<usize>,
}

pub fn eval(args: &EvalArgs, seed: u64, out: Option<&Path>) -> Result<()> {
    if args.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let mut dataset = load_dataset(&args.data, args.labels.as_deref())?;
    let truth = dataset
        .labels()
        .context("evaluation needs labeled data")?
        .to_vec();
    check_dims(&checkpoint, dataset.dim())?;
    if let Some(bounds) = &checkpoint.centering {
        let mid = midpoint(bounds);
        for mut row in dataset.features.rows_mut() {
            row -= &mid;
        }
    }
    let num_mc = args.num_mc.unwrap_or(checkpoint.config.num_mc_e);

    let mut accuracies = Vec::with_capacity(args.runs);
    let mut nmis = Vec::with_capacity(args.runs);
    let mut report = String::new();
    for run in 0..args.runs {
        let run_seed = seed + run as u64;
        let (pred, _) = em::assign_batch(
            &checkpoint.models,
            dataset.features.view(),
            num_mc,
            run_seed,
        )?;
        let acc = clustering_accuracy(&pred, &truth)?;
        let mi = nmi(&pred, &truth)?;
        let _ = writeln!(report, "run {run} (seed {run_seed}): accuracy {acc:.4} nmi {mi:.4}");
        accuracies.push(acc);
        nmis.push(mi);
    }
    let _ = writeln!(report, "accuracy {}", summarize(&accuracies));
    let _ = writeln!(report, "nmi {}", summarize(&nmis));
    print!("{report}");
    if let Some(path) = out {
        write_atomic(path, report.as_bytes())?;
    }
    Ok(())
}

/// `mean m std s best b` over one metric's runs; sample std, 0 for one run.
fn summarize(values: &[f64]) -> String {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    format!("mean {mean:.4} std {std:.4} best {best:.4}")
}

fn check_dims(checkpoint: &Checkpoint, data_dim: usize) -> Result<()> {
    let model_dim = checkpoint.models[0].data_dim();
    if model_dim != data_dim {
        bail!("checkpoint expects {model_dim}-dimensional points, data has {data_dim}");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Trained model artifact from `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cluster index to sample from.
    #[arg(long, conflicts_with = "all")]
    pub cluster: Option<usize>,
    /// Sample every cluster; grid rows / label values follow cluster order.
    #[arg(long)]
    pub all: bool,
    /// Samples per cluster.
    #[arg(long)]
    pub count: usize,
}

pub fn generate(args: &GenerateArgs, seed: u64, out: &Path) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let clusters: Vec<usize> = if args.all {
        (0..checkpoint.models.len()).collect()
    } else if let Some(c) = args.cluster {
        vec![c]
    } else {
        bail!("pass --cluster <index> or --all");
    };
    let mut groups: Vec<Array2<f32>> = clusters
        .iter()
        .map(|&c| em::generate(&checkpoint.models, c, args.count, seed))
        .collect::<Result<_, _>>()?;
    if let Some(bounds) = &checkpoint.centering {
        let mid = midpoint(bounds);
        for group in &mut groups {
            for mut row in group.rows_mut() {
                row += &mid;
            }
        }
    }
    let dim = checkpoint.models[0].data_dim();
    match out.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let views: Vec<_> = groups.iter().map(|g| g.view()).collect();
            let features = ndarray::concatenate(Axis(0), &views).expect("same width");
            let labels: Vec<usize> = clusters
                .iter()
                .flat_map(|&c| std::iter::repeat_n(c, args.count))
                .collect();
            write_csv(out, features.view(), Some(&labels))?;
        }
        Some("pgm") => {
            let side = square_side(dim).with_context(|| {
                format!("{dim}-dimensional samples do not form square images; use a .csv output")
            })?;
            write_pgm_grid(out, &groups, side)?;
        }
        _ => bail!(
            "output {} must end in .csv (points) or .pgm (image grid)",
            out.display()
        ),
    }
    println!(
        "wrote {} samples per cluster for {} cluster(s) to {}",
        args.count,
        clusters.len(),
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct BaselineGmmArgs {
    /// Labeled data: a CSV file, or an IDX image file when --labels is given.
    #[arg(long)]
    pub data: PathBuf,
    /// IDX label file paired with --data.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Number of mixture components.
    #[arg(long)]
    pub clusters: usize,
    /// EM iterations.
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
}

pub fn baseline_gmm(args: &BaselineGmmArgs, seed: u64, out: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(&args.data, args.labels.as_deref())?;
    let truth = dataset
        .labels()
        .context("the baseline needs labeled data for scoring")?
        .to_vec();
    let x = dataset.features.mapv(f64::from);
    let fit = Gmm::fit(x.view(), args.clusters, args.iterations, seed)?;
    let pred = fit.model.predict_batch(x.view());
    let acc = clustering_accuracy(&pred, &truth)?;
    let mi = nmi(&pred, &truth)?;
    let ll = fit.log_likelihood.last().expect("at least one iteration");

    let mut report = String::new();
    let _ = writeln!(
        report,
        "gmm baseline: {} components, {} iterations, seed {seed}",
        args.clusters, args.iterations
    );
    let _ = writeln!(report, "final log-likelihood {ll:.4}");
    let _ = writeln!(report, "accuracy {acc:.4}");
    let _ = writeln!(report, "nmi {mi:.4}");
    print!("{report}");
    if let Some(path) = out {
        write_atomic(path, report.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_parse_and_reject_ragged_rows() {
        let centers = parse_centers("0,0; 1.5,-2 ;3,4").unwrap();
        assert_eq!(centers.nrows(), 3);
        assert_eq!(centers[[1, 1]], -2.0);

        let err = parse_centers("0,0;1").unwrap_err().to_string();
        assert!(err.contains("center 2"), "{err}");
        let err = format!("{:#}", parse_centers("0,0;a,b").unwrap_err());
        assert!(err.contains("invalid coordinate"), "{err}");
    }

    #[test]
    fn history_rows_and_blank_accuracy() {
        let rows = history_csv(&[
            EmRecord {
                iteration: 1,
                objective: -2.5,
                mean_max_responsibility: 0.5,
                accuracy: None,
                learning_rate: 0.001,
            },
            EmRecord {
                iteration: 2,
                objective: -3.0,
                mean_max_responsibility: 0.75,
                accuracy: Some(0.9),
                learning_rate: 0.0009,
            },
        ]);
        let expected = "iteration,objective,mean_max_responsibility,accuracy,learning_rate\n\
                        1,-2.5,0.5,,0.001\n\
                        2,-3,0.75,0.9,0.0009\n";
        assert_eq!(rows, expected);
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(summarize(&[0.5]), "mean 0.5000 std 0.0000 best 0.5000");
        let text = summarize(&[0.4, 0.6]);
        assert!(text.starts_with("mean 0.5000 std 0.1414"), "{text}");
        assert!(text.ends_with("best 0.6000"), "{text}");
    }
}
