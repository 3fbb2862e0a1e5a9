//! fwd-transfer: train on the first task alone for a few epochs, then probe
//! every task's holdout separability under that frozen extractor. The gap
//! acc(task 0) - acc(task t) says how much of the early representation
//! carries to classes it never saw.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use mire::exec::{map_indexed, ExecMode};
use mire::metrics::mean_and_ci;
use mire::stream::{holdout_synthetic, make_split_synthetic, StreamConfig};
use mire::trainer::{within_task_holdout_accuracy, Method, TrainConfig, Trainer};
use serde::Serialize;

use crate::spec::Format;
use crate::table::{fmt_f64, write_json, Table};
use crate::Outcome;

#[derive(Serialize)]
struct TransferSpec<'a> {
    command: &'a str,
    methods: Vec<&'a str>,
    seeds: &'a [u64],
    epochs: usize,
    format: Format,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct MethodTransfer {
    /// Per-seed mean gap over unseen tasks, seed order.
    seed_mean_gaps: Vec<f64>,
    mean_gap: f64,
    ci_gap: f64,
}

#[derive(Serialize)]
struct TransferSummary<'a> {
    spec_hash: &'a str,
    methods: BTreeMap<String, MethodTransfer>,
    /// Seeds where the second method's mean gap is <= the first's.
    wins: usize,
    win_fraction: f64,
    failures: &'a [String],
    spec: &'a TransferSpec<'a>,
}

struct Cell {
    method: Method,
    seed: u64,
    /// (task, holdout accuracy, gap vs task 0).
    rows: Vec<(usize, f64, f64)>,
    mean_gap: f64,
}

fn run_cell(cfg: &TrainConfig, method: Method, seed: u64, epochs: usize) -> Result<Cell> {
    let cell_cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let scfg = StreamConfig {
        seed,
        ..cell_cfg.stream.clone()
    };
    let stream = make_split_synthetic(&scfg)?;
    let holdout = holdout_synthetic(&scfg, cell_cfg.holdout_fraction)?;
    let trainer = Trainer::run_first_task_epochs(&cell_cfg, method, &stream, epochs)?;
    let extractor = &trainer.state().extractor;

    let layout = stream.layout();
    let mut rows = Vec::new();
    let mut acc0 = 0.0;
    for t in 0..layout.num_tasks() {
        let acc = within_task_holdout_accuracy(extractor, &holdout, &layout.task(t).classes)?;
        if t == 0 {
            acc0 = acc;
        }
        rows.push((t, acc, acc0 - acc));
    }
    let unseen: Vec<f64> = rows.iter().skip(1).map(|r| r.2).collect();
    let mean_gap = unseen.iter().sum::<f64>() / unseen.len().max(1) as f64;
    Ok(Cell {
        method,
        seed,
        rows,
        mean_gap,
    })
}

pub fn cmd_fwd_transfer(
    out_root: &Path,
    format: Format,
    cfg: &TrainConfig,
    seeds: &[u64],
    epochs: usize,
) -> Result<Outcome> {
    // Fixed comparison pair: the pair loss alone against the rebalanced one.
    let methods = [Method::MsNcm, Method::Mire];
    let spec = TransferSpec {
        command: "fwd-transfer",
        methods: methods.iter().map(|m| m.as_str()).collect(),
        seeds,
        epochs,
        format,
        train: cfg,
    };
    let (dir, hash) = crate::spec::spec_dir(out_root, "fwd-transfer", &spec)?;

    let cells: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results = map_indexed(ExecMode::from_env(), cells.len(), |i| {
        let (method, seed) = cells[i];
        run_cell(cfg, method, seed, epochs)
            .map_err(|e| format!("{} seed {seed}: {e}", method.as_str()))
    });

    let mut table = Table::new(
        "transfer",
        &["method", "seed", "task", "holdout_acc", "gap"],
    );
    let mut per_method: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    let mut failures = Vec::new();
    for res in results {
        match res {
            Err(e) => failures.push(e),
            Ok(cell) => {
                for (t, acc, gap) in &cell.rows {
                    table.push(vec![
                        cell.method.as_str().to_string(),
                        cell.seed.to_string(),
                        t.to_string(),
                        fmt_f64(*acc),
                        fmt_f64(*gap),
                    ]);
                }
                per_method
                    .entry(cell.method.as_str().to_string())
                    .or_default()
                    .insert(cell.seed, cell.mean_gap);
            }
        }
    }
    table.write(&dir, format)?;

    // One-sided sign check: on how many seeds does the rebalanced loss carry
    // at least as well as the pair loss alone?
    let mut wins = 0;
    let mut compared = 0;
    if let (Some(ms), Some(mi)) = (
        per_method.get(Method::MsNcm.as_str()),
        per_method.get(Method::Mire.as_str()),
    ) {
        for (seed, ms_gap) in ms {
            if let Some(mi_gap) = mi.get(seed) {
                compared += 1;
                if mi_gap <= ms_gap {
                    wins += 1;
                }
            }
        }
    }

    let mut method_summaries = BTreeMap::new();
    for (name, gaps) in &per_method {
        let ordered: Vec<f64> = gaps.values().copied().collect();
        let (mean_gap, ci_gap) = mean_and_ci(&ordered).context("no completed seeds")?;
        method_summaries.insert(
            name.clone(),
            MethodTransfer {
                seed_mean_gaps: ordered,
                mean_gap,
                ci_gap,
            },
        );
    }
    write_json(
        &dir,
        "summary.json",
        &TransferSummary {
            spec_hash: &hash,
            methods: method_summaries,
            wins,
            win_fraction: wins as f64 / compared.max(1) as f64,
            failures: &failures,
            spec: &spec,
        },
    )?;

    Ok(Outcome { dir, failures })
}
