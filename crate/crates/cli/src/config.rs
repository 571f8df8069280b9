//! Flat `key = value` run configuration files.
//!
//! Exactly the schedule and architecture keys plus `seed`; `#` starts a
//! comment. Every key is required once, so a preset file is a complete
//! record of its run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use mixvae::em::{EmConfig, TrainMode};

pub const CONFIG_KEYS: [&str; 15] = [
    "num_clusters",
    "encoder_dims",
    "decoder_dims",
    "leaky_relu_slope",
    "dropout",
    "beta",
    "learning_rate",
    "lr_decay",
    "lr_decay_every",
    "batch_size",
    "num_mc_e",
    "num_mc_m",
    "epochs_per_m_step",
    "iterations",
    "seed",
];

pub fn load_config(path: &Path) -> Result<EmConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in config file {}", path.display()))
}

pub fn parse_config(text: &str) -> Result<EmConfig> {
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got `{}`", idx + 1, raw.trim());
        };
        let (key, value) = (key.trim(), value.trim());
        if !CONFIG_KEYS.contains(&key) {
            bail!("line {}: unknown key `{key}`", idx + 1);
        }
        if seen.insert(key, value).is_some() {
            bail!("line {}: duplicate key `{key}`", idx + 1);
        }
    }
    let missing: Vec<&str> = CONFIG_KEYS
        .iter()
        .filter(|k| !seen.contains_key(*k))
        .copied()
        .collect();
    if !missing.is_empty() {
        bail!("missing keys: {}", missing.join(", "));
    }
    Ok(EmConfig {
        num_clusters: value(&seen, "num_clusters")?,
        encoder_dims: dims(&seen, "encoder_dims")?,
        decoder_dims: dims(&seen, "decoder_dims")?,
        slope: value(&seen, "leaky_relu_slope")?,
        dropout: value(&seen, "dropout")?,
        beta: value(&seen, "beta")?,
        learning_rate: value(&seen, "learning_rate")?,
        lr_decay: value(&seen, "lr_decay")?,
        lr_decay_every: value(&seen, "lr_decay_every")?,
        batch_size: value(&seen, "batch_size")?,
        num_mc_e: value(&seen, "num_mc_e")?,
        num_mc_m: value(&seen, "num_mc_m")?,
        epochs_per_m_step: value(&seen, "epochs_per_m_step")?,
        iterations: value(&seen, "iterations")?,
        seed: value(&seen, "seed")?,
        mode: TrainMode::Stochastic,
    })
}

fn value<T>(seen: &BTreeMap<&str, &str>, key: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    let raw = seen[key];
    raw.parse()
        .map_err(|e| anyhow::anyhow!("key `{key}`: invalid value `{raw}` ({e})"))
}

fn dims(seen: &BTreeMap<&str, &str>, key: &str) -> Result<Vec<usize>> {
    let raw = seen[key];
    raw.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|e| anyhow::anyhow!("key `{key}`: invalid layer width `{part}` ({e})"))
        })
        .collect()
}
