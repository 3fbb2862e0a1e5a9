//! The run and ablate commands: (method, seed) cells over the synthetic
//! stream, each cell fully isolated with its own stream, holdout, and
//! trainer, executed through the library's execution-mode switch.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use mire::checkpoint::save_trainer;
use mire::exec::{map_indexed, ExecMode};
use mire::metrics::mean_and_ci;
use mire::stream::{holdout_synthetic, make_split_synthetic, StreamConfig};
use mire::trainer::{Method, RunRecord, TrainConfig, Trainer};
use serde::Serialize;

use crate::spec::Format;
use crate::table::{fmt_f64, write_json, Table};
use crate::Outcome;

#[derive(Serialize)]
struct BenchSpec<'a> {
    command: &'a str,
    methods: Vec<&'a str>,
    seeds: &'a [u64],
    format: Format,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct MethodSummary {
    runs: usize,
    mean_acc: f64,
    ci_acc: f64,
    mean_fgt: Option<f64>,
    ci_fgt: Option<f64>,
}

#[derive(Serialize)]
struct BenchSummary<'a> {
    spec_hash: &'a str,
    methods: &'a BTreeMap<String, MethodSummary>,
    failures: &'a [String],
    spec: &'a BenchSpec<'a>,
}

fn run_cells(
    cfg: &TrainConfig,
    methods: &[Method],
    seeds: &[u64],
) -> Vec<(Method, u64, mire::error::Result<(RunRecord, Trainer)>)> {
    let cells: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    map_indexed(ExecMode::from_env(), cells.len(), |i| {
        let (method, seed) = cells[i];
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
        (method, seed, out)
    })
}

/// Shared emitter for run and ablate: runs the grid, writes the three row
/// tables plus summary.json, optionally checkpoints each trainer.
fn emit(
    command: &'static str,
    out_root: &Path,
    format: Format,
    cfg: &TrainConfig,
    methods: &[Method],
    seeds: &[u64],
    checkpoints: bool,
) -> Result<(Outcome, BTreeMap<String, MethodSummary>)> {
    let spec = BenchSpec {
        command,
        methods: methods.iter().map(|m| m.as_str()).collect(),
        seeds,
        format,
        train: cfg,
    };
    let (dir, hash) = crate::spec::spec_dir(out_root, command, &spec)?;

    let results = run_cells(cfg, methods, seeds);

    let mut runs = Table::new(
        "runs",
        &[
            "method",
            "seed",
            "final_acc",
            "final_fgt",
            "final_mean_error_current",
            "final_mean_error_corrected",
        ],
    );
    let mut matrix = Table::new(
        "matrix",
        &["method", "seed", "after_task", "eval_task", "accuracy"],
    );
    let mut snapshots = Table::new(
        "snapshots",
        &[
            "method",
            "seed",
            "task",
            "mean_error_current",
            "mean_error_corrected",
        ],
    );
    let mut by_method: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut failures = Vec::new();

    for (method, seed, out) in &results {
        let name = method.as_str();
        match out {
            Err(e) => failures.push(format!("{name} seed {seed}: {e}")),
            Ok((rec, trainer)) => {
                let last = rec.snapshots.last().context("run with no snapshots")?;
                runs.push(vec![
                    name.to_string(),
                    seed.to_string(),
                    fmt_f64(rec.final_average_accuracy),
                    rec.final_average_forgetting
                        .map(fmt_f64)
                        .unwrap_or_default(),
                    fmt_f64(last.mean_error_current),
                    fmt_f64(last.mean_error_corrected),
                ]);
                for (t, row) in rec.matrix.rows().iter().enumerate() {
                    for (j, acc) in row.iter().enumerate() {
                        matrix.push(vec![
                            name.to_string(),
                            seed.to_string(),
                            t.to_string(),
                            j.to_string(),
                            fmt_f64(*acc),
                        ]);
                    }
                }
                for snap in &rec.snapshots {
                    snapshots.push(vec![
                        name.to_string(),
                        seed.to_string(),
                        snap.task.to_string(),
                        fmt_f64(snap.mean_error_current),
                        fmt_f64(snap.mean_error_corrected),
                    ]);
                }
                let slot = by_method.entry(name.to_string()).or_default();
                slot.0.push(rec.final_average_accuracy);
                if let Some(f) = rec.final_average_forgetting {
                    slot.1.push(f);
                }
                if checkpoints {
                    let path = dir.join(format!("{name}-s{seed}.trainer"));
                    save_trainer(&path, trainer)
                        .with_context(|| format!("checkpoint {}", path.display()))?;
                }
            }
        }
    }

    runs.write(&dir, format)?;
    matrix.write(&dir, format)?;
    snapshots.write(&dir, format)?;

    let mut summaries = BTreeMap::new();
    for (name, (accs, fgts)) in &by_method {
        let Some((mean_acc, ci_acc)) = mean_and_ci(accs) else {
            continue;
        };
        let fgt = mean_and_ci(fgts);
        summaries.insert(
            name.clone(),
            MethodSummary {
                runs: accs.len(),
                mean_acc,
                ci_acc,
                mean_fgt: fgt.map(|(m, _)| m),
                ci_fgt: fgt.map(|(_, c)| c),
            },
        );
    }
    write_json(
        &dir,
        "summary.json",
        &BenchSummary {
            spec_hash: &hash,
            methods: &summaries,
            failures: &failures,
            spec: &spec,
        },
    )?;

    Ok((Outcome { dir, failures }, summaries))
}

pub fn cmd_run(
    out_root: &Path,
    format: Format,
    cfg: &TrainConfig,
    method: Method,
    seeds: &[u64],
) -> Result<Outcome> {
    let (outcome, _) = emit("run", out_root, format, cfg, &[method], seeds, true)?;
    Ok(outcome)
}

pub fn cmd_ablate(
    out_root: &Path,
    format: Format,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Outcome> {
    let methods = Method::ablation_grid();
    let (outcome, summaries) = emit("ablate", out_root, format, cfg, &methods, seeds, false)?;

    let mut grid = Table::new(
        "grid",
        &[
            "method",
            "replay",
            "mi_rebalance",
            "cc_penalty",
            "drift_correction",
            "mean_acc",
            "mean_fgt",
        ],
    );
    let flag = |b: bool| if b { "on" } else { "off" }.to_string();
    for method in methods {
        let Some(s) = summaries.get(method.as_str()) else {
            continue;
        };
        let spec = method.spec();
        grid.push(vec![
            method.as_str().to_string(),
            flag(spec.replay),
            flag(spec.mi_rebalance),
            flag(spec.cc_penalty),
            flag(spec.drift_correction),
            fmt_f64(s.mean_acc),
            s.mean_fgt.map(fmt_f64).unwrap_or_default(),
        ]);
    }
    grid.write(&outcome.dir, format)?;
    Ok(outcome)
}
