//! Sequential vs parallel timing on the two data-parallel surfaces:
//! multi-seed training cells and ascent restarts. Both modes produce
//! identical results (each work item owns its seed-derived RNG), so the
//! only question is wall-clock speedup, which depends on the host's cores.
//! Compiled without the `parallel` feature the Parallel arm degrades to the
//! sequential loop and the two groups should tie.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mire::exec::{map_indexed, ExecMode};
use mire::stream::{holdout_synthetic, make_split_synthetic, StreamConfig};
use mire::theory::{maximize_lambda_objective, AscentConfig};
use mire::trainer::{Method, TrainConfig, Trainer};

const MODES: [(&str, ExecMode); 2] = [
    ("sequential", ExecMode::Sequential),
    ("parallel", ExecMode::Parallel),
];

/// Small enough that a cell finishes in tens of milliseconds, large enough
/// that the fan-out dominates the fork-join overhead.
fn cell_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.stream = StreamConfig {
        samples_per_class: 60,
        ..cfg.stream
    };
    cfg
}

fn run_cell(cfg: &TrainConfig, seed: u64) -> f64 {
    let cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let scfg = StreamConfig {
        seed,
        ..cfg.stream.clone()
    };
    let stream = make_split_synthetic(&scfg).expect("stream");
    let holdout = holdout_synthetic(&scfg, cfg.holdout_fraction).expect("holdout");
    let (record, _) = Trainer::run(&cfg, Method::MirePlusPlus, &stream, &holdout).expect("run");
    record.final_average_accuracy
}

fn bench_training_cells(c: &mut Criterion) {
    let cfg = cell_config();
    let seeds = 4u64;
    let mut group = c.benchmark_group("training_cells");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::new(name, seeds), &mode, |b, &mode| {
            b.iter(|| map_indexed(mode, seeds as usize, |i| run_cell(&cfg, i as u64)))
        });
    }
    group.finish();
}

fn bench_ascent_restarts(c: &mut Criterion) {
    let ascent = AscentConfig {
        starts: 32,
        max_iters: 2_000,
        ..AscentConfig::default()
    };
    let mut group = c.benchmark_group("ascent_restarts");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::new(name, ascent.starts), &mode, |b, &mode| {
            b.iter(|| maximize_lambda_objective(2, 8, 1.5, &ascent, mode).expect("ascent"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_training_cells, bench_ascent_restarts);
criterion_main!(benches);
