//! mean-error: track both class-mean estimators over a run. After each task
//! the trainer snapshots the mean distance from holdout-true class means for
//! the plain memory mean and for the drift-corrected prototype, so this is
//! mostly a reshaping of the run record.

use std::path::Path;

use anyhow::{Context, Result};
use mire::exec::{map_indexed, ExecMode};
use mire::stream::{holdout_synthetic, make_split_synthetic, StreamConfig};
use mire::trainer::{Method, TrainConfig, Trainer};
use serde::Serialize;

use crate::spec::Format;
use crate::table::{fmt_f64, write_json, Table};
use crate::Outcome;

#[derive(Serialize)]
struct MeanErrSpec<'a> {
    command: &'a str,
    method: &'a str,
    seeds: &'a [u64],
    format: Format,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct MeanErrSummary<'a> {
    spec_hash: &'a str,
    /// Seed means of the final-snapshot errors, per estimator.
    final_mean_error_current: f64,
    final_mean_error_corrected: f64,
    corrected_le_current: bool,
    failures: &'a [String],
    spec: &'a MeanErrSpec<'a>,
}

pub fn cmd_mean_error(
    out_root: &Path,
    format: Format,
    cfg: &TrainConfig,
    method: Method,
    seeds: &[u64],
) -> Result<Outcome> {
    let spec = MeanErrSpec {
        command: "mean-error",
        method: method.as_str(),
        seeds,
        format,
        train: cfg,
    };
    let (dir, hash) = crate::spec::spec_dir(out_root, "mean-error", &spec)?;

    let results = map_indexed(ExecMode::from_env(), seeds.len(), |i| {
        let seed = seeds[i];
        let cell_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let scfg = StreamConfig {
            seed,
            ..cell_cfg.stream.clone()
        };
        let out = make_split_synthetic(&scfg).and_then(|stream| {
            let holdout = holdout_synthetic(&scfg, cell_cfg.holdout_fraction)?;
            Trainer::run(&cell_cfg, method, &stream, &holdout)
        });
        (seed, out)
    });

    let mut table = Table::new("mean_error", &["seed", "task", "mode", "mean_error"]);
    let mut finals: Vec<(f64, f64)> = Vec::new();
    let mut failures = Vec::new();
    for (seed, out) in &results {
        match out {
            Err(e) => failures.push(format!("seed {seed}: {e}")),
            Ok((rec, _)) => {
                for snap in &rec.snapshots {
                    for (mode, err) in [
                        ("current", snap.mean_error_current),
                        ("corrected", snap.mean_error_corrected),
                    ] {
                        table.push(vec![
                            seed.to_string(),
                            snap.task.to_string(),
                            mode.to_string(),
                            fmt_f64(err),
                        ]);
                    }
                }
                let last = rec.snapshots.last().context("run with no snapshots")?;
                finals.push((last.mean_error_current, last.mean_error_corrected));
            }
        }
    }
    table.write(&dir, format)?;

    let n = finals.len().max(1) as f64;
    let cur = finals.iter().map(|f| f.0).sum::<f64>() / n;
    let cor = finals.iter().map(|f| f.1).sum::<f64>() / n;
    write_json(
        &dir,
        "summary.json",
        &MeanErrSummary {
            spec_hash: &hash,
            final_mean_error_current: cur,
            final_mean_error_corrected: cor,
            corrected_le_current: cor <= cur,
            failures: &failures,
            spec: &spec,
        },
    )?;

    Ok(Outcome { dir, failures })
}
