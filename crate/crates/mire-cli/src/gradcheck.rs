//! gradcheck: rebuild each training loss as a pure function of the network
//! parameters and compare reverse-mode gradients against central finite
//! differences, across many fresh inits and data draws.
//!
//! The verdict metric is the scale-relative error: max coordinate gap
//! divided by the gradient's own max norm. Coordinate-wise relative error
//! blows up whenever a single gradient entry crosses zero, which says
//! nothing about the correctness of the tape.
//!
//! Central differences are only evidence where the loss is smooth at the
//! probe resolution, so a data draw is redrawn (deterministically, from the
//! same stream) when it is unfit for step h: a relu preactivation within
//! the straddle window of zero turns the difference quotient into a lie
//! about the kink, and a pre-normalization row norm near zero puts the
//! 1/norm^2 curvature of x/|x| beyond what the h^2 truncation term can
//! resolve. Both cases were verified to vanish as h^2 under a shrinking
//! step, which is the signature of a correct analytic gradient against a
//! saturated difference quotient, not of a wrong one.

use std::path::Path;

use anyhow::Result;
use mire::exec::{map_indexed, ExecMode};
use mire::losses::{cc_penalty, mire_loss, ms_loss, MireParams};
use mire::model::{Extractor, ExtractorConfig};
use mire::ndgrad::{grad_check_multi, Tensor};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::spec::Format;
use crate::table::{fmt_f64, write_json, Table};
use crate::Outcome;

pub struct GradCheckArgs {
    pub trials: u64,
    pub fd_step: f64,
    pub tolerance: f64,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub head_out: usize,
    pub batch: usize,
    pub cc_weight: f64,
}

#[derive(Serialize)]
struct GradCheckSpec<'a> {
    command: &'a str,
    trials: u64,
    fd_step: f64,
    tolerance: f64,
    input_dim: usize,
    hidden: &'a [usize],
    feature_dim: usize,
    head_hidden: usize,
    head_out: usize,
    batch: usize,
    cc_weight: f64,
    format: Format,
}

#[derive(Serialize)]
struct GradCheckSummary<'a> {
    spec_hash: &'a str,
    checks: usize,
    passed: usize,
    /// Per loss name, worst scale-relative error over all trials.
    worst: std::collections::BTreeMap<&'static str, f64>,
    failures: &'a [String],
    spec: &'a GradCheckSpec<'a>,
}

const LOSSES: [&str; 3] = ["ms", "mire", "mire++"];
const MEM_CLASSES: usize = 2;
const MEM_PER_CLASS: usize = 4;
/// A weight step of h moves a preactivation by at most h times the layer
/// input, which stays single-digit for standard normal data through
/// fan-in-scaled layers; 50 steps of margin clears it.
const KINK_MARGIN_STEPS: f64 = 50.0;
/// Keeps (h / norm)^2 at least four orders below the default tolerance.
const NORM_FLOOR: f64 = 1e-2;
const MAX_DRAWS: usize = 32;

fn normal_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(rows, cols, data).expect("shape matches data length")
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = normal_rows(rng, rows, cols);
    for r in 0..rows {
        let row = &mut t.data_mut()[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

struct Draw {
    batch: Tensor,
    labels: Vec<usize>,
    /// Per synthetic memory class: raw inputs and frozen feature rows.
    memory: Vec<(Tensor, Tensor)>,
}

fn draw_data(rng: &mut ChaCha8Rng, args: &GradCheckArgs) -> Draw {
    let batch = normal_rows(rng, args.batch, args.input_dim);
    let label_dist = Uniform::new(0usize, 5);
    let labels = (0..args.batch).map(|_| label_dist.sample(rng)).collect();
    let memory = (0..MEM_CLASSES)
        .map(|_| {
            (
                normal_rows(rng, MEM_PER_CLASS, args.input_dim),
                unit_rows(rng, MEM_PER_CLASS, args.feature_dim),
            )
        })
        .collect();
    Draw {
        batch,
        labels,
        memory,
    }
}

fn min_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn min_row_norm(t: &Tensor) -> f64 {
    (0..t.rows())
        .map(|r| t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// None when the draw can be probed at step `h`; otherwise why not.
/// Layer order in the preactivations: trunk hidden (relu) .. trunk feature
/// (linear, normalized on the features path), head hidden (relu), head out
/// (linear, normalized on the embedding path).
fn unfit_reason(
    extractor: &Extractor,
    args: &GradCheckArgs,
    draw: &Draw,
    h: f64,
) -> Result<Option<String>> {
    let kink_margin = KINK_MARGIN_STEPS * h;
    let trunk_relu = args.hidden.len();

    let pres = extractor.preactivations(&draw.batch)?;
    for (i, p) in pres.iter().enumerate() {
        let is_relu = i < trunk_relu || i == trunk_relu + 1;
        if is_relu && min_abs(p) < kink_margin {
            return Ok(Some(format!(
                "batch relu preactivation {:.1e} inside the {kink_margin:.1e} straddle window",
                min_abs(p)
            )));
        }
    }
    let head_out = pres.last().expect("at least one layer");
    if min_row_norm(head_out) < NORM_FLOOR {
        return Ok(Some(format!(
            "embedding row norm {:.1e} under the {NORM_FLOOR:.0e} curvature floor",
            min_row_norm(head_out)
        )));
    }

    for (mem_x, _) in &draw.memory {
        let pres = extractor.preactivations(mem_x)?;
        for p in pres.iter().take(trunk_relu) {
            if min_abs(p) < kink_margin {
                return Ok(Some(format!(
                    "memory relu preactivation {:.1e} inside the {kink_margin:.1e} straddle window",
                    min_abs(p)
                )));
            }
        }
        if min_row_norm(&pres[trunk_relu]) < NORM_FLOOR {
            return Ok(Some(format!(
                "memory feature row norm {:.1e} under the {NORM_FLOOR:.0e} curvature floor",
                min_row_norm(&pres[trunk_relu])
            )));
        }
    }
    Ok(None)
}

struct TrialReport {
    trial: u64,
    draws: usize,
    /// (loss name, max_rel_err, scale_rel_err).
    rows: Vec<(&'static str, f64, f64)>,
    error: Option<String>,
}

fn run_trial(args: &GradCheckArgs, trial: u64) -> TrialReport {
    let mut report = TrialReport {
        trial,
        draws: 0,
        rows: Vec::new(),
        error: None,
    };
    let cfg = ExtractorConfig {
        input_dim: args.input_dim,
        hidden: args.hidden.clone(),
        feature_dim: args.feature_dim,
        head_hidden: args.head_hidden,
        head_out: args.head_out,
        seed: trial,
    };
    let extractor = match Extractor::new(cfg) {
        Ok(e) => e,
        Err(e) => {
            report.error = Some(format!("trial {trial}: init: {e}"));
            return report;
        }
    };

    // Data draws come from a stream disjoint from the init draws: the
    // extractor derives its own init stream from the seed internally.
    // Unfit draws are skipped by drawing again from the same stream, so the
    // retained draw is still a deterministic function of the trial index.
    let mut rng = ChaCha8Rng::seed_from_u64(trial);
    let mut chosen = None;
    for _ in 0..MAX_DRAWS {
        let draw = draw_data(&mut rng, args);
        report.draws += 1;
        match unfit_reason(&extractor, args, &draw, args.fd_step) {
            Ok(None) => {
                chosen = Some(draw);
                break;
            }
            Ok(Some(_)) => continue,
            Err(e) => {
                report.error = Some(format!("trial {trial}: fitness probe: {e}"));
                return report;
            }
        }
    }
    let Some(Draw {
        batch,
        labels,
        memory,
    }) = chosen
    else {
        report.error = Some(format!(
            "trial {trial}: no draw fit for finite differences in {MAX_DRAWS} attempts"
        ));
        return report;
    };

    let params = MireParams::default();
    let inputs: Vec<Tensor> = extractor
        .layers()
        .flat_map(|l| [l.w.clone(), l.b.clone()])
        .collect();

    for name in LOSSES {
        let check = grad_check_multi(
            |tape, vars| {
                let bound = extractor.bind_with(vars)?;
                let x = tape.constant(batch.clone());
                let emb = extractor.embeddings(tape, &bound, x)?;
                let mut loss = match name {
                    "ms" => ms_loss(tape, emb, &labels, &params.ms)?,
                    _ => mire_loss(tape, emb, &labels, &params)?,
                };
                if name == "mire++" {
                    for (mem_x, stored) in &memory {
                        let cur =
                            extractor.features(tape, &bound, tape.constant(mem_x.clone()))?;
                        if let Some(rho) = cc_penalty(tape, cur, stored, false)? {
                            loss = tape.sub(loss, tape.scale(rho, args.cc_weight)?)?;
                        }
                    }
                }
                Ok(loss)
            },
            &inputs,
            args.fd_step,
        );
        match check {
            Ok(r) => report.rows.push((name, r.max_rel_err, r.scale_rel_err)),
            Err(e) => {
                report.error = Some(format!("trial {trial} {name}: {e}"));
                return report;
            }
        }
    }
    report
}

pub fn cmd_gradcheck(out_root: &Path, format: Format, args: &GradCheckArgs) -> Result<Outcome> {
    let spec = GradCheckSpec {
        command: "gradcheck",
        trials: args.trials,
        fd_step: args.fd_step,
        tolerance: args.tolerance,
        input_dim: args.input_dim,
        hidden: &args.hidden,
        feature_dim: args.feature_dim,
        head_hidden: args.head_hidden,
        head_out: args.head_out,
        batch: args.batch,
        cc_weight: args.cc_weight,
        format,
    };
    let (dir, hash) = crate::spec::spec_dir(out_root, "gradcheck", &spec)?;

    let reports = map_indexed(ExecMode::from_env(), args.trials as usize, |i| {
        run_trial(args, i as u64)
    });

    let mut table = Table::new(
        "gradcheck",
        &["trial", "loss", "max_rel_err", "scale_rel_err", "draws", "verdict"],
    );
    let mut failures = Vec::new();
    let mut worst = std::collections::BTreeMap::new();
    let mut checks = 0;
    let mut passed = 0;
    for report in reports {
        if let Some(e) = report.error {
            failures.push(e);
        }
        for (name, max_rel, scale_rel) in report.rows {
            checks += 1;
            let ok = scale_rel < args.tolerance;
            if ok {
                passed += 1;
            } else {
                failures.push(format!(
                    "trial {} {name}: scale_rel_err {scale_rel:.3e} >= {:.1e}",
                    report.trial, args.tolerance
                ));
            }
            let w = worst.entry(name).or_insert(0.0f64);
            *w = w.max(scale_rel);
            table.push(vec![
                report.trial.to_string(),
                name.to_string(),
                fmt_f64(max_rel),
                fmt_f64(scale_rel),
                report.draws.to_string(),
                if ok { "pass" } else { "fail" }.to_string(),
            ]);
        }
    }
    table.write(&dir, format)?;
    write_json(
        &dir,
        "summary.json",
        &GradCheckSummary {
            spec_hash: &hash,
            checks,
            passed,
            worst,
            failures: &failures,
            spec: &spec,
        },
    )?;

    Ok(Outcome { dir, failures })
}
