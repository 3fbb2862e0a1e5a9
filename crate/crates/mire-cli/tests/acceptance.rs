//! Acceptance gate: ten numbered checks covering gradient fidelity, the
//! estimator closed forms, the discrete objective's regime change, the
//! variance law, reservoir statistics, the directional benchmark, transfer
//! and mean-error directions, metric exactness, and byte determinism.
//!
//! Run `cargo test -p mire-cli --test acceptance -- --nocapture` to see one
//! [PASS]/[FAIL] line per criterion; a failed criterion panics with its line.
//!
//! Every check takes a global lock so wall-clock budgets are measured
//! without interleaving from sibling tests.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use mire::exec::{map_indexed, ExecMode};
use mire::losses::entropy_estimate;
use mire::memory::{MemoryEntry, ReplayMemory};
use mire::metrics::AccuracyMatrix;
use mire::prototypes::{
    corrected_estimator_variance, correction_reduces_variance, naive_estimator_variance,
};
use mire::stream::{holdout_synthetic, make_split_synthetic, StreamConfig};
use mire::theory::{diagnose, maximize_lambda_objective, AscentConfig};
use mire::trainer::{within_task_holdout_accuracy, Method, TrainConfig, Trainer};
use mire::{Tape, Tensor};
use rand::distributions::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

static GATE: Mutex<()> = Mutex::new(());

fn report(criterion: usize, name: &str, pass: bool, detail: String) {
    let tag = if pass { "[PASS]" } else { "[FAIL]" };
    let line = format!("{tag} criterion {criterion} ({name}): {detail}");
    println!("{line}");
    assert!(pass, "{line}");
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn seeds10() -> Vec<u64> {
    (0..10).collect()
}

/// Per-seed benchmark cell under the desk defaults, one method.
fn bench_cell(cfg: &TrainConfig, method: Method, seed: u64) -> (f64, Option<f64>, f64, f64) {
    let cell = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let scfg = StreamConfig {
        seed,
        ..cell.stream.clone()
    };
    let stream = make_split_synthetic(&scfg).expect("stream");
    let holdout = holdout_synthetic(&scfg, cell.holdout_fraction).expect("holdout");
    let (rec, _) = Trainer::run(&cell, method, &stream, &holdout).expect("run");
    let last = rec.snapshots.last().expect("snapshots");
    (
        rec.final_average_accuracy,
        rec.final_average_forgetting,
        last.mean_error_current,
        last.mean_error_corrected,
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_01_gradient_fidelity() {
    let _g = lock();
    let tmp = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_mire"))
        .args([
            "gradcheck",
            "--trials",
            "50",
            "--fd-step",
            "1e-5",
            "--tolerance",
            "1e-4",
            "--out",
            tmp.path().to_str().unwrap(),
        ])
        .output()
        .expect("binary runs");
    let elapsed = started.elapsed();
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    report(
        1,
        "gradient fidelity",
        out.status.success() && elapsed < Duration::from_secs(120),
        format!(
            "50 configs x 3 losses vs central differences at h=1e-5, tol 1e-4, {:.1}s (budget 120s){}",
            elapsed.as_secs_f64(),
            if stderr.is_empty() { String::new() } else { format!("; stderr: {stderr}") },
        ),
    );
}

#[test]
fn criterion_02_entropy_closed_forms() {
    let _g = lock();
    let eval = |rows: &[Vec<f64>], delta: f64| -> f64 {
        let tape = Tape::new();
        let emb = tape.constant(Tensor::from_rows(rows).unwrap());
        let h = entropy_estimate(&tape, emb, delta).unwrap();
        tape.scalar_value(h).unwrap()
    };
    let e1 = std::f64::consts::E;

    let identical = eval(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]], 5.0);
    let orthogonal = eval(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
    let antipodal = eval(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 1.0);

    let want_identical = -5.0;
    let want_orthogonal = -((e1 + 1.0) / 2.0).ln();
    let want_antipodal = -1.0f64.cosh().ln();

    let errs = [
        (identical - want_identical).abs(),
        (orthogonal - want_orthogonal).abs(),
        (antipodal - want_antipodal).abs(),
    ];
    report(
        2,
        "entropy closed forms",
        errs.iter().all(|e| *e < 1e-9),
        format!(
            "identical {identical:.12} (want {want_identical}), orthogonal {orthogonal:.12} \
             (want {want_orthogonal:.12}), antipodal {antipodal:.12} (want {want_antipodal:.12}); \
             max abs err {:.2e} < 1e-9",
            errs.iter().cloned().fold(0.0, f64::max)
        ),
    );
}

#[test]
fn criterion_03_rebalancing_regimes() {
    let _g = lock();
    let started = Instant::now();
    let cfg = AscentConfig::default();
    let mode = ExecMode::from_env();

    let low = maximize_lambda_objective(2, 8, 0.5, &cfg, mode).expect("ascent at 0.5");
    let low_diag = diagnose(&low.joint);
    let low_ok =
        low_diag.support_sizes.iter().all(|&s| s == 1) && low_diag.overlap_mass < 1e-6;

    let high = maximize_lambda_objective(2, 8, 1.5, &cfg, mode).expect("ascent at 1.5");
    let high_diag = diagnose(&high.joint);
    let high_ok = high_diag.max_uniform_marginal_dev < 1e-3;

    let elapsed = started.elapsed();
    report(
        3,
        "rebalancing regimes",
        low_ok && high_ok && elapsed < Duration::from_secs(60),
        format!(
            "lambda 0.5: supports {:?}, overlap {:.2e} (< 1e-6); lambda 1.5: marginal dev \
             {:.2e} (< 1e-3); {:.1}s (budget 60s)",
            low_diag.support_sizes,
            low_diag.overlap_mass,
            high_diag.max_uniform_marginal_dev,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_04_variance_law() {
    let _g = lock();
    const TRIALS: usize = 100_000;
    const N: usize = 20;
    let (sigma_stored, sigma_current) = (1.0, 1.5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let normal = StandardNormal;

    let mut detail = Vec::new();
    let mut all_ok = true;
    for rho in [0.2, 0.5, 0.9] {
        let mut corrected_errs = Vec::with_capacity(TRIALS);
        let mut naive_errs = Vec::with_capacity(TRIALS);
        for _ in 0..TRIALS {
            let mut stored_mean = 0.0;
            let mut current_mean = 0.0;
            for _ in 0..N {
                let u: f64 = normal.sample(&mut rng);
                let v: f64 = normal.sample(&mut rng);
                let stored_dev = sigma_stored * u;
                let current_dev = sigma_current * (rho * u + (1.0 - rho * rho).sqrt() * v);
                stored_mean += stored_dev / N as f64;
                current_mean += current_dev / N as f64;
            }
            // drift-corrected estimator: prototype - stored mean + current
            // mean; with the prototype at truth its error is the difference
            corrected_errs.push(current_mean - stored_mean);
            naive_errs.push(current_mean);
        }
        let var = |xs: &[f64]| {
            let m = mean(xs);
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
        };
        let emp_corrected = var(&corrected_errs);
        let emp_naive = var(&naive_errs);
        let want = corrected_estimator_variance(sigma_stored, sigma_current, rho, N);
        let rel = (emp_corrected - want).abs() / want;
        let predicted_reduction = correction_reduces_variance(sigma_stored, sigma_current, rho);
        let observed_reduction = emp_corrected < emp_naive;
        let formula_naive = naive_estimator_variance(sigma_current, N);
        let ok = rel < 0.05 && predicted_reduction == observed_reduction;
        all_ok &= ok;
        detail.push(format!(
            "rho {rho}: Var {emp_corrected:.5} vs {want:.5} (rel {rel:.3}), naive {emp_naive:.5} \
             (law {formula_naive:.5}), reduction predicted {predicted_reduction} observed \
             {observed_reduction}"
        ));
    }
    report(
        4,
        "variance law",
        all_ok,
        format!("1e5 trials, n=20, sigmas 1/1.5; {}", detail.join("; ")),
    );
}

#[test]
fn criterion_05_reservoir_statistics() {
    let _g = lock();
    const STREAM: usize = 1000;
    const QUOTA: usize = 50;
    const TRIALS: usize = 2000;

    let mut counts = vec![0u32; STREAM];
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial as u64);
        let mut memory = ReplayMemory::new(QUOTA).unwrap();
        for item in 0..STREAM {
            memory.insert(
                MemoryEntry {
                    x: vec![item as f64],
                    y: 0,
                    z: vec![0.0],
                },
                &mut rng,
            );
        }
        assert_eq!(memory.len(), QUOTA);
        for entry in memory.class_entries(0) {
            counts[entry.x[0] as usize] += 1;
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / TRIALS as f64).collect();
    let global = mean(&freqs);
    let worst = freqs
        .iter()
        .map(|f| (f - 0.05).abs())
        .fold(0.0, f64::max);
    let within_tight = freqs.iter().filter(|f| (**f - 0.05).abs() <= 0.01).count();
    let bucket_worst = freqs
        .chunks(100)
        .map(|b| (mean(b) - 0.05).abs())
        .fold(0.0, f64::max);

    let ok = (global - 0.05).abs() < 1e-3
        && worst <= 0.025
        && within_tight * 10 >= STREAM * 9
        && bucket_worst <= 0.01;
    report(
        5,
        "reservoir statistics",
        ok,
        format!(
            "2000 trials, quota 50 over 1000 items: global mean {global:.5} (0.05 +- 1e-3), \
             worst item dev {worst:.4} (<= 0.025), {within_tight}/1000 within +- 0.01 (>= 900), \
             worst 100-item bucket dev {bucket_worst:.5} (<= 0.01)"
        ),
    );
}

#[test]
fn criterion_06_directional_benchmark() {
    let _g = lock();
    let started = Instant::now();
    let cfg = TrainConfig::default();
    let methods = Method::all();
    let seeds = seeds10();

    let cells: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results = map_indexed(ExecMode::from_env(), cells.len(), |i| {
        let (m, s) = cells[i];
        (m, bench_cell(&cfg, m, s))
    });

    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut fgt: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (m, (a, f, _, _)) in &results {
        acc.entry(m.as_str()).or_default().push(*a);
        if let Some(f) = f {
            fgt.entry(m.as_str()).or_default().push(*f);
        }
    }
    let acc: BTreeMap<&str, f64> = acc.iter().map(|(k, v)| (*k, mean(v))).collect();
    let fgt: BTreeMap<&str, f64> = fgt.iter().map(|(k, v)| (*k, mean(v))).collect();

    let elapsed = started.elapsed();
    let ordered = acc["mire++"] > acc["mire"] - 0.01 && acc["mire"] > acc["ms-ncm"] - 0.01;
    let separation = acc["mire++"] - acc["ms-ncm"] >= 0.02;
    let finetune_lowest = ["ms-ncm", "mire", "mire++"]
        .iter()
        .all(|m| acc["finetune"] < acc[m]);
    let forgets_less = fgt["mire++"] < fgt["finetune"];
    let ok = ordered
        && separation
        && finetune_lowest
        && forgets_less
        && elapsed < Duration::from_secs(600);
    report(
        6,
        "directional benchmark",
        ok,
        format!(
            "10-seed mean ACC: finetune {:.4} < ms-ncm {:.4}, mire {:.4}, mire++ {:.4} \
             (adjacent ties allowed within 0.01, mire++ - ms-ncm = {:.4} >= 0.02); mean FGT \
             mire++ {:.4} < finetune {:.4}; {:.1}s (budget 600s)",
            acc["finetune"],
            acc["ms-ncm"],
            acc["mire"],
            acc["mire++"],
            acc["mire++"] - acc["ms-ncm"],
            fgt["mire++"],
            fgt["finetune"],
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_07_forward_transfer() {
    let _g = lock();
    let cfg = TrainConfig::default();
    let seeds = seeds10();

    let gaps_for = |method: Method| -> Vec<f64> {
        map_indexed(ExecMode::from_env(), seeds.len(), |i| {
            let cell = TrainConfig {
                seed: seeds[i],
                ..cfg.clone()
            };
            let scfg = StreamConfig {
                seed: seeds[i],
                ..cell.stream.clone()
            };
            let stream = make_split_synthetic(&scfg).expect("stream");
            let holdout = holdout_synthetic(&scfg, cell.holdout_fraction).expect("holdout");
            let trainer =
                Trainer::run_first_task_epochs(&cell, method, &stream, 5).expect("first task");
            let layout = stream.layout();
            let acc0 = within_task_holdout_accuracy(
                &trainer.state().extractor,
                &holdout,
                &layout.task(0).classes,
            )
            .expect("task 0 accuracy");
            let unseen: Vec<f64> = (1..layout.num_tasks())
                .map(|t| {
                    acc0 - within_task_holdout_accuracy(
                        &trainer.state().extractor,
                        &holdout,
                        &layout.task(t).classes,
                    )
                    .expect("task accuracy")
                })
                .collect();
            mean(&unseen)
        })
    };

    let ms_gaps = gaps_for(Method::MsNcm);
    let mire_gaps = gaps_for(Method::Mire);
    let wins = ms_gaps
        .iter()
        .zip(&mire_gaps)
        .filter(|(ms, mi)| mi <= ms)
        .count();
    report(
        7,
        "forward transfer",
        wins >= 7,
        format!(
            "5-epoch first-task training: mire mean unseen-task gap <= ms-ncm on {wins}/10 \
             seeds (need >= 7); seed-mean gaps ms-ncm {:.4}, mire {:.4}",
            mean(&ms_gaps),
            mean(&mire_gaps)
        ),
    );
}

#[test]
fn criterion_08_class_mean_estimation() {
    let _g = lock();
    // ten-task variant: one class per task, same hundred-slot memory
    let mut cfg = TrainConfig::default();
    cfg.stream.classes_per_task = 1;
    let seeds = seeds10();

    let finals = map_indexed(ExecMode::from_env(), seeds.len(), |i| {
        let (_, _, current, corrected) = bench_cell(&cfg, Method::MirePlusPlus, seeds[i]);
        (current, corrected)
    });
    let current = mean(&finals.iter().map(|f| f.0).collect::<Vec<_>>());
    let corrected = mean(&finals.iter().map(|f| f.1).collect::<Vec<_>>());
    report(
        8,
        "class-mean estimation",
        corrected <= current,
        format!(
            "10 tasks x 1 class, final snapshot, 10-seed mean error: corrected prototype \
             {corrected:.4} <= memory mean {current:.4}"
        ),
    );
}

#[test]
fn criterion_09_metric_exactness() {
    let _g = lock();
    let mut m = AccuracyMatrix::new();
    m.push_row(vec![0.9]).unwrap();
    m.push_row(vec![0.6, 0.8]).unwrap();
    let acc = m.average_accuracy().unwrap();
    let fgt = m.average_forgetting().unwrap();
    report(
        9,
        "metric exactness",
        (acc - 0.7).abs() < 1e-15 && (fgt - 0.3).abs() < 1e-15,
        format!("hand matrix: ACC {acc} (want 0.7), FGT {fgt} (want 0.3), both within 1e-15"),
    );
}

#[test]
fn criterion_10_byte_determinism() {
    let _g = lock();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_mire"))
            .args([
                "run",
                "--seeds",
                "0..2",
                "--samples-per-class",
                "60",
                "--out",
                dir.path().to_str().unwrap(),
            ])
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "run failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let listing = |root: &Path| -> Vec<(String, Vec<u8>)> {
        let spec_dir = std::fs::read_dir(root)
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.is_dir())
            .expect("artifact dir");
        let mut files: Vec<_> = std::fs::read_dir(spec_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect()
    };
    let (a, b) = (listing(dirs[0].path()), listing(dirs[1].path()));
    let names: Vec<&String> = a.iter().map(|f| &f.0).collect();
    let same_names = names == b.iter().map(|f| &f.0).collect::<Vec<_>>();
    let has_csv = names.iter().any(|n| n.ends_with(".csv"));
    let has_ckpt = names.iter().any(|n| n.ends_with(".trainer"));
    let all_equal = same_names && a.iter().zip(&b).all(|(x, y)| x.1 == y.1);
    report(
        10,
        "byte determinism",
        all_equal && has_csv && has_ckpt,
        format!(
            "two identical invocations: {} artifacts including CSVs and checkpoints compare \
             byte-identical",
            a.len()
        ),
    );
}
