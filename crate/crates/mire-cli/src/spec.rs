//! Flag and config-file resolution into a hashed experiment spec.
//!
//! Precedence is defaults < config file < explicit flags. The resolved spec
//! is serialized once; its FNV-1a hash namespaces the output directory so
//! no two distinct specs ever share artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use mire::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Training, stream, and model knobs. Every field is optional; unset ones
/// fall through to the config file and then to the library defaults.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Knobs {
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub classes_per_task: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    /// Typical distance between class means, in noise-std units.
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Trunk hidden widths, comma separated (e.g. "64,64").
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    pub head_out: Option<usize>,
    #[arg(long)]
    pub memory_capacity: Option<usize>,
    #[arg(long)]
    pub replay_batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight on the embedding-entropy bonus.
    #[arg(long)]
    pub mi_weight: Option<f64>,
    /// vMF kernel concentration for the entropy estimate.
    #[arg(long)]
    pub mi_delta: Option<f64>,
    #[arg(long)]
    pub cc_weight: Option<f64>,
    /// Classes sampled per step for the consistency penalty.
    #[arg(long)]
    pub cc_classes: Option<usize>,
    #[arg(long)]
    pub cc_mean_over_dims: Option<bool>,
    /// Prototype retention factor.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub aug_noise: Option<f64>,
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
}

impl Knobs {
    /// Later knob sets win field-by-field.
    pub fn or(self, fallback: &Knobs) -> Knobs {
        macro_rules! pick {
            ($($f:ident),*) => {
                Knobs { $($f: self.$f.or_else(|| fallback.$f.clone())),* }
            };
        }
        pick!(
            num_classes,
            classes_per_task,
            samples_per_class,
            input_dim,
            separation,
            batch_size,
            hidden,
            feature_dim,
            head_hidden,
            head_out,
            memory_capacity,
            replay_batch,
            lr,
            mi_weight,
            mi_delta,
            cc_weight,
            cc_classes,
            cc_mean_over_dims,
            gamma,
            aug_noise,
            holdout_fraction
        )
    }

    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        macro_rules! set {
            ($($field:ident -> $($path:ident).+;)*) => {
                $(if let Some(v) = self.$field { cfg.$($path).+ = v; })*
            };
        }
        set! {
            num_classes -> stream.num_classes;
            classes_per_task -> stream.classes_per_task;
            samples_per_class -> stream.samples_per_class;
            separation -> stream.separation;
            batch_size -> stream.batch_size;
            feature_dim -> extractor.feature_dim;
            head_hidden -> extractor.head_hidden;
            head_out -> extractor.head_out;
            memory_capacity -> memory_capacity;
            replay_batch -> replay_batch;
            lr -> lr;
            mi_weight -> loss.mi_weight;
            mi_delta -> loss.mi_delta;
            cc_weight -> cc_weight;
            cc_classes -> cc_classes;
            cc_mean_over_dims -> cc_mean_over_dims;
            gamma -> proto_gamma;
            aug_noise -> aug_noise;
            holdout_fraction -> holdout_fraction;
        }
        if let Some(d) = self.input_dim {
            cfg.stream.input_dim = d;
            cfg.extractor.input_dim = d;
        }
        if let Some(spec) = &self.hidden {
            cfg.extractor.hidden = spec
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .with_context(|| format!("bad hidden width {p:?}"))
                })
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(())
    }
}

/// Config file: the same keys as the flags, in JSON.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seeds: Option<String>,
    pub method: Option<String>,
    pub epochs: Option<usize>,
    pub lambdas: Option<String>,
    #[serde(flatten)]
    pub knobs: Knobs,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Resolves the training config from defaults, file, and flags. The returned
/// config carries seed 0; per-cell seeds are assigned by the runner.
pub fn resolve_train(flags: &Knobs, file: &FileConfig) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let merged = flags.clone().or(&file.knobs);
    merged.apply(&mut cfg)?;
    cfg.seed = 0;
    cfg.validate()?;
    Ok(cfg)
}

/// "0..9" (inclusive), "7", or a comma mix of both. Duplicates collapse,
/// first occurrence wins the position.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for piece in text.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            bail!("empty seed entry in {text:?}");
        }
        if let Some((a, b)) = piece.split_once("..") {
            let a: u64 = a.trim().parse().with_context(|| format!("bad seed {piece:?}"))?;
            let b: u64 = b.trim().parse().with_context(|| format!("bad seed {piece:?}"))?;
            if a > b {
                bail!("seed range {piece:?} runs backwards");
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(piece.parse().with_context(|| format!("bad seed {piece:?}"))?);
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    seeds.retain(|s| seen.insert(*s));
    if seeds.is_empty() {
        bail!("no seeds in {text:?}");
    }
    Ok(seeds)
}

pub fn parse_lambdas(text: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad lambda {p:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.is_empty() || vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
        bail!("lambdas must be finite and non-negative: {text:?}");
    }
    Ok(vals)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// `<out>/<command>-<first 12 hash hex chars>`, creating the directory.
pub fn spec_dir<S: Serialize>(out_root: &Path, command: &str, spec: &S) -> Result<(PathBuf, String)> {
    let encoded = serde_json::to_string(spec).context("encoding spec")?;
    let hash = format!("{:016x}", fnv1a64(encoded.as_bytes()));
    let tag = &hash[..12];
    let dir = out_root.join(format!("{command}-{tag}"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok((dir, tag.to_string()))
}
