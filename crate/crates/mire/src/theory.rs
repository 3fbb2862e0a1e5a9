//! The discrete tradeoff behind the entropy-rebalanced objective: over
//! channels q(z | y) from C classes to K codes, maximize
//! lambda * H(Z) - H(Z | Y).
//!
//! The weight decides the shape of the optimum. Below 1 the best channel
//! collapses each class to its own code (objective lambda ln C); at exactly 1
//! the objective is the mutual information, maximized by any channel whose
//! class supports are disjoint (objective ln C); above 1 it pays to fill the
//! whole code space, and when C divides K the optimum spreads each class
//! uniformly over its own block of K/C codes (objective
//! ln C + (lambda - 1) ln K). Multi-start projected gradient ascent recovers
//! these optima numerically and an exhaustive simplex grid cross-checks small
//! instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};

fn xlnx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// A class prior together with a conditional code distribution per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    priors: Vec<f64>,
    /// `channel[c][z]` = q(z | y = c); every row lives on the simplex.
    channel: Vec<Vec<f64>>,
}

impl DiscreteJoint {
    pub fn new(priors: Vec<f64>, channel: Vec<Vec<f64>>) -> Result<Self> {
        if priors.is_empty() || channel.len() != priors.len() {
            return Err(Error::InvalidConfig(
                "need one prior and one channel row per class".into(),
            ));
        }
        let k = channel[0].len();
        if k == 0 {
            return Err(Error::InvalidConfig("need at least one code".into()));
        }
        if channel.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidConfig("ragged channel".into()));
        }
        for dist in std::iter::once(&priors).chain(channel.iter()) {
            if dist.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
                return Err(Error::InvalidConfig(format!(
                    "probabilities outside [0, 1]: {dist:?}"
                )));
            }
            let s: f64 = dist.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "distribution sums to {s}, not 1"
                )));
            }
        }
        Ok(DiscreteJoint { priors, channel })
    }

    pub fn uniform_priors(channel: Vec<Vec<f64>>) -> Result<Self> {
        let c = channel.len();
        if c == 0 {
            return Err(Error::InvalidConfig("need at least one class".into()));
        }
        Self::new(vec![1.0 / c as f64; c], channel)
    }

    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }

    pub fn num_codes(&self) -> usize {
        self.channel[0].len()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn channel(&self) -> &[Vec<f64>] {
        &self.channel
    }

    pub fn marginal(&self) -> Vec<f64> {
        let k = self.num_codes();
        let mut m = vec![0.0; k];
        for (p, row) in self.priors.iter().zip(&self.channel) {
            for (mz, q) in m.iter_mut().zip(row) {
                *mz += p * q;
            }
        }
        m
    }

    pub fn h_z(&self) -> f64 {
        -self.marginal().iter().map(|&p| xlnx(p)).sum::<f64>()
    }

    pub fn h_z_given_y(&self) -> f64 {
        -self
            .priors
            .iter()
            .zip(&self.channel)
            .map(|(p, row)| p * row.iter().map(|&q| xlnx(q)).sum::<f64>())
            .sum::<f64>()
    }

    pub fn mutual_information(&self) -> f64 {
        self.h_z() - self.h_z_given_y()
    }
}

/// lambda * H(Z) - H(Z | Y).
pub fn lambda_objective(joint: &DiscreteJoint, lambda: f64) -> f64 {
    lambda * joint.h_z() - joint.h_z_given_y()
}

/// Euclidean projection of `v` onto the probability simplex (Duchi et al.'s
/// sort-and-threshold rule).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cum += u;
        let candidate = (cum - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&u| (u - theta).max(0.0)).collect()
}

/// Per-entry ascent direction p_c (ln q_cz - lambda ln p(z) + 1 - lambda),
/// with logs clamped at 1e-300 so boundary entries push hard toward zero
/// instead of producing NaN.
pub fn lambda_objective_gradient(joint: &DiscreteJoint, lambda: f64) -> Vec<Vec<f64>> {
    let marginal = joint.marginal();
    let clamped_ln = |x: f64| x.max(1e-300).ln();
    joint
        .priors
        .iter()
        .zip(&joint.channel)
        .map(|(&p, row)| {
            row.iter()
                .zip(&marginal)
                .map(|(&q, &m)| p * (clamped_ln(q) - lambda * clamped_ln(m) + 1.0 - lambda))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentConfig {
    pub starts: usize,
    pub step: f64,
    pub max_iters: usize,
    /// Fixed-point tolerance on the projected step, max-norm.
    pub tol: f64,
    pub seed: u64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig {
            starts: 64,
            step: 0.1,
            max_iters: 10_000,
            tol: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentResult {
    pub joint: DiscreteJoint,
    pub objective: f64,
    /// Which restart produced the winner (lowest index wins ties).
    pub start_index: usize,
    pub iterations: usize,
    pub converged: bool,
    /// How many of the restarts reached the fixed-point tolerance.
    pub num_converged: usize,
}

fn dirichlet_row(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // normalized Exp(1) draws are Dirichlet(1, ..., 1)
    let mut row: Vec<f64> = (0..k)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            e.max(1e-12)
        })
        .collect();
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= s);
    row
}

fn ascend_from(
    start: Vec<Vec<f64>>,
    priors: &[f64],
    lambda: f64,
    cfg: &AscentConfig,
) -> (DiscreteJoint, f64, usize, bool) {
    let mut joint = DiscreteJoint {
        priors: priors.to_vec(),
        channel: start,
    };
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        iterations += 1;
        let grad = lambda_objective_gradient(&joint, lambda);
        let mut delta = 0.0f64;
        let next: Vec<Vec<f64>> = joint
            .channel
            .iter()
            .zip(&grad)
            .map(|(row, g)| {
                let stepped: Vec<f64> = row
                    .iter()
                    .zip(g)
                    .map(|(&q, &d)| q + cfg.step * d)
                    .collect();
                let proj = project_to_simplex(&stepped);
                for (a, b) in proj.iter().zip(row) {
                    delta = delta.max((a - b).abs());
                }
                proj
            })
            .collect();
        joint.channel = next;
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }
    let objective = lambda_objective(&joint, lambda);
    (joint, objective, iterations, converged)
}

/// Multi-start projected gradient ascent on the lambda objective with
/// uniform class priors. Restarts are drawn up front from one seeded stream,
/// so the result is identical in both execution modes; the best restart wins
/// by objective with the lowest start index breaking ties.
pub fn maximize_lambda_objective(
    num_classes: usize,
    num_codes: usize,
    lambda: f64,
    cfg: &AscentConfig,
    mode: ExecMode,
) -> Result<AscentResult> {
    if num_classes == 0 || num_codes == 0 {
        return Err(Error::InvalidConfig("need classes and codes".into()));
    }
    if cfg.starts == 0 || cfg.step <= 0.0 || cfg.max_iters == 0 {
        return Err(Error::InvalidConfig("degenerate ascent settings".into()));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "objective weight {lambda} must be finite and non-negative"
        )));
    }
    let priors = vec![1.0 / num_classes as f64; num_classes];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts: Vec<Vec<Vec<f64>>> = (0..cfg.starts)
        .map(|_| (0..num_classes).map(|_| dirichlet_row(num_codes, &mut rng)).collect())
        .collect();

    let runs = map_indexed(mode, cfg.starts, |i| {
        ascend_from(starts[i].clone(), &priors, lambda, cfg)
    });

    let num_converged = runs.iter().filter(|r| r.3).count();
    let mut best: Option<(usize, &(DiscreteJoint, f64, usize, bool))> = None;
    for (i, run) in runs.iter().enumerate() {
        if best.map_or(true, |(_, b)| run.1 > b.1) {
            best = Some((i, run));
        }
    }
    let (start_index, (joint, objective, iterations, converged)) = best.expect("starts > 0");
    Ok(AscentResult {
        joint: joint.clone(),
        objective: *objective,
        start_index,
        iterations: *iterations,
        converged: *converged,
        num_converged,
    })
}

/// The analytic optimum under uniform priors, where one is known: any
/// lambda < 1 needs K >= C (disjoint one-code classes), lambda = 1 needs
/// K >= C as well, and lambda > 1 is closed-form when C divides K.
pub fn closed_form_optimum(num_classes: usize, num_codes: usize, lambda: f64) -> Option<f64> {
    let c = num_classes as f64;
    let k = num_codes as f64;
    if num_codes < num_classes {
        return None;
    }
    if lambda < 1.0 {
        Some(lambda * c.ln())
    } else if lambda == 1.0 {
        Some(c.ln())
    } else if num_codes % num_classes == 0 {
        Some(c.ln() + (lambda - 1.0) * k.ln())
    } else {
        None
    }
}

/// Structure report for a learned channel: per-class support sizes at a
/// 1e-9 mass threshold, the posterior-overlap mass (total mass not claimed
/// by each code's dominant class, i.e. the Bayes error of reading the class
/// off the code), the residual class entropy given the code, and how far the
/// code marginal sits from uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDiagnostics {
    pub support_sizes: Vec<usize>,
    pub overlap_mass: f64,
    pub h_y_given_z: f64,
    pub marginal: Vec<f64>,
    pub max_uniform_marginal_dev: f64,
}

pub fn diagnose(joint: &DiscreteJoint) -> ChannelDiagnostics {
    const SUPPORT_EPS: f64 = 1e-9;
    let marginal = joint.marginal();
    let k = joint.num_codes();
    let support_sizes = joint
        .channel()
        .iter()
        .map(|row| row.iter().filter(|&&q| q > SUPPORT_EPS).count())
        .collect();
    let mut overlap_mass = 0.0;
    let mut h_y_given_z = 0.0;
    for z in 0..k {
        let joint_col: Vec<f64> = joint
            .priors()
            .iter()
            .zip(joint.channel())
            .map(|(p, row)| p * row[z])
            .collect();
        let col_mass: f64 = joint_col.iter().sum();
        let top = joint_col.iter().cloned().fold(0.0, f64::max);
        overlap_mass += col_mass - top;
        if col_mass > 0.0 {
            // H(Y | Z = z) weighted by p(z)
            h_y_given_z -= joint_col
                .iter()
                .map(|&j| if j > 0.0 { j * (j / col_mass).ln() } else { 0.0 })
                .sum::<f64>();
        }
    }
    let uniform = 1.0 / k as f64;
    let max_uniform_marginal_dev = marginal
        .iter()
        .map(|m| (m - uniform).abs())
        .fold(0.0, f64::max);
    ChannelDiagnostics {
        support_sizes,
        overlap_mass,
        h_y_given_z,
        marginal,
        max_uniform_marginal_dev,
    }
}

/// Brute-force maximum over channels whose rows live on the resolution-step
/// simplex grid (row entries are multiples of 1/resolution). Exponential in
/// K and C; restricted to two classes and at most four codes, which is the
/// regime the ascent is cross-checked in.
pub fn exhaustive_grid_max(
    num_codes: usize,
    lambda: f64,
    resolution: usize,
) -> Result<(DiscreteJoint, f64)> {
    if num_codes == 0 || num_codes > 4 {
        return Err(Error::InvalidConfig(
            "grid search supports 1..=4 codes".into(),
        ));
    }
    if resolution == 0 {
        return Err(Error::InvalidConfig("grid resolution must be positive".into()));
    }
    let rows = compositions(resolution, num_codes);
    let scale = 1.0 / resolution as f64;
    let as_row = |counts: &[usize]| -> Vec<f64> {
        counts.iter().map(|&c| c as f64 * scale).collect()
    };
    let mut best: Option<(DiscreteJoint, f64)> = None;
    for a in &rows {
        let row_a = as_row(a);
        for b in &rows {
            let joint = DiscreteJoint {
                priors: vec![0.5, 0.5],
                channel: vec![row_a.clone(), as_row(b)],
            };
            let obj = lambda_objective(&joint, lambda);
            if best.as_ref().map_or(true, |(_, bo)| obj > *bo) {
                best = Some((joint, obj));
            }
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// All ways to write `total` as an ordered sum of `parts` non-negative terms.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            let mut v = Vec::with_capacity(parts);
            v.push(first);
            v.append(&mut rest);
            out.push(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn singletons(c: usize, k: usize) -> DiscreteJoint {
        let channel = (0..c)
            .map(|i| {
                let mut row = vec![0.0; k];
                row[i] = 1.0;
                row
            })
            .collect();
        DiscreteJoint::uniform_priors(channel).unwrap()
    }

    #[test]
    fn objective_hand_values() {
        let uniform = DiscreteJoint::uniform_priors(vec![
            vec![0.5, 0.5],
            vec![0.5, 0.5],
        ])
        .unwrap();
        // all entropy, no information: (lambda - 1) ln 2
        for &l in &[0.5, 1.0, 2.0] {
            let want = (l - 1.0) * 2.0f64.ln();
            assert!((lambda_objective(&uniform, l) - want).abs() < 1e-12);
        }
        let s = singletons(2, 2);
        for &l in &[0.5, 1.0, 2.0] {
            let want = l * 2.0f64.ln();
            assert!((lambda_objective(&s, l) - want).abs() < 1e-12);
        }
        assert!((s.mutual_information() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let c = rng.gen_range(2..4);
            let k = rng.gen_range(2..5);
            let channel: Vec<Vec<f64>> =
                (0..c).map(|_| dirichlet_row(k, &mut rng)).collect();
            let joint = DiscreteJoint::uniform_priors(channel.clone()).unwrap();
            let lambda = rng.gen_range(0.2..2.5);
            let grad = lambda_objective_gradient(&joint, lambda);
            let h = 1e-6;
            for i in 0..c {
                for z in 0..k {
                    // entries near the boundary are compared against a clamped
                    // log; only interior entries admit a clean central probe
                    if channel[i][z] < 1e-2 {
                        continue;
                    }
                    // probe off-simplex: the objective extends smoothly and the
                    // partial derivative is still well defined
                    let mut plus = channel.clone();
                    plus[i][z] += h;
                    let mut minus = channel.clone();
                    minus[i][z] -= h;
                    let jp = DiscreteJoint {
                        priors: joint.priors().to_vec(),
                        channel: plus,
                    };
                    let jm = DiscreteJoint {
                        priors: joint.priors().to_vec(),
                        channel: minus,
                    };
                    let fd = (lambda_objective(&jp, lambda) - lambda_objective(&jm, lambda))
                        / (2.0 * h);
                    let a = grad[i][z];
                    let rel = (a - fd).abs() / f64::max(1e-8, a.abs() + fd.abs());
                    assert!(rel < 1e-5, "class {i} code {z}: {a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn projection_lands_on_the_simplex_at_the_nearest_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let k = rng.gen_range(1..6);
            let v: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = project_to_simplex(&v);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x >= 0.0));
            let dist: f64 = v.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
            for _ in 0..20 {
                let w = dirichlet_row(k, &mut rng);
                let wd: f64 = v.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(dist <= wd + 1e-9, "projection is not the closest point");
            }
        }
        // already feasible points are fixed
        let p = project_to_simplex(&[0.2, 0.3, 0.5]);
        assert!((p[0] - 0.2).abs() < 1e-12);
        assert!((p[1] - 0.3).abs() < 1e-12);
        assert!((p[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn small_weight_collapses_to_disjoint_singletons() {
        let cfg = AscentConfig {
            starts: 32,
            ..AscentConfig::default()
        };
        let res =
            maximize_lambda_objective(2, 3, 0.5, &cfg, ExecMode::Sequential).unwrap();
        let want = closed_form_optimum(2, 3, 0.5).unwrap();
        assert!(
            (res.objective - want).abs() < 1e-6,
            "objective {} vs {want}",
            res.objective
        );
        let diag = diagnose(&res.joint);
        assert_eq!(diag.support_sizes, vec![1, 1]);
        assert!(diag.overlap_mass < 1e-6);
        assert!(res.num_converged > 0);
    }

    #[test]
    fn large_weight_fills_the_code_space_uniformly() {
        let cfg = AscentConfig {
            starts: 32,
            ..AscentConfig::default()
        };
        let res =
            maximize_lambda_objective(2, 4, 1.5, &cfg, ExecMode::Sequential).unwrap();
        let want = closed_form_optimum(2, 4, 1.5).unwrap();
        assert!(
            (res.objective - want).abs() < 1e-6,
            "objective {} vs {want}",
            res.objective
        );
        let diag = diagnose(&res.joint);
        assert!(diag.max_uniform_marginal_dev < 1e-4);
        assert!(diag.overlap_mass < 1e-4, "blocks must stay disjoint");
    }

    #[test]
    fn at_weight_one_distinct_disjoint_channels_tie() {
        // two structurally different disjoint-support channels reach the same
        // value ln C: singletons, and uniform two-code blocks
        let a = singletons(2, 4);
        let b = DiscreteJoint::uniform_priors(vec![
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.5],
        ])
        .unwrap();
        let ja = lambda_objective(&a, 1.0);
        let jb = lambda_objective(&b, 1.0);
        assert!((ja - 2.0f64.ln()).abs() < 1e-12);
        assert!((ja - jb).abs() < 1e-12);
    }

    #[test]
    fn ascent_beats_the_exhaustive_grid() {
        for &lambda in &[0.5, 1.5] {
            let (_, grid_best) = exhaustive_grid_max(3, lambda, 20).unwrap();
            let res = maximize_lambda_objective(
                2,
                3,
                lambda,
                &AscentConfig {
                    starts: 32,
                    ..AscentConfig::default()
                },
                ExecMode::Sequential,
            )
            .unwrap();
            assert!(
                res.objective >= grid_best - 1e-9,
                "lambda {lambda}: ascent {} under grid {grid_best}",
                res.objective
            );
        }
    }

    #[test]
    fn execution_modes_produce_identical_results() {
        let cfg = AscentConfig {
            starts: 16,
            max_iters: 2000,
            ..AscentConfig::default()
        };
        let seq = maximize_lambda_objective(2, 4, 1.3, &cfg, ExecMode::Sequential).unwrap();
        let par = maximize_lambda_objective(2, 4, 1.3, &cfg, ExecMode::Parallel).unwrap();
        assert_eq!(seq.objective.to_bits(), par.objective.to_bits());
        assert_eq!(seq.start_index, par.start_index);
        assert_eq!(seq.joint.channel(), par.joint.channel());
    }

    #[test]
    fn diagnostics_hand_case() {
        let j = DiscreteJoint::uniform_priors(vec![
            vec![0.5, 0.5, 0.0],
            vec![0.0, 0.5, 0.5],
        ])
        .unwrap();
        let d = diagnose(&j);
        assert_eq!(d.support_sizes, vec![2, 2]);
        // code 1 carries 0.25 from each class: 0.25 is unclaimed
        assert!((d.overlap_mass - 0.25).abs() < 1e-12);
        assert!((d.marginal[1] - 0.5).abs() < 1e-12);
        // H(Y | Z): code 1 is a fair coin over classes with p(z) = 1/2
        assert!((d.h_y_given_z - 0.5 * 2.0f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn objective_is_concave_along_fixed_disjoint_support_chords(
            seed in 0u64..1000,
            lambda_scaled in 0usize..3,
        ) {
            // restricted to channels sharing one disjoint block structure the
            // objective is (lambda - 1) sum_c p_c H(q_c) + lambda H(Y), which
            // is concave for lambda >= 1
            let lambda = [1.0, 1.5, 2.0][lambda_scaled];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 4;
            // blocks: class 0 owns codes {0, 1}, class 1 owns {2, 3}
            let sample = |rng: &mut ChaCha8Rng| {
                let a = dirichlet_row(2, rng);
                let b = dirichlet_row(2, rng);
                DiscreteJoint::uniform_priors(vec![
                    vec![a[0], a[1], 0.0, 0.0],
                    vec![0.0, 0.0, b[0], b[1]],
                ]).unwrap()
            };
            let x = sample(&mut rng);
            let y = sample(&mut rng);
            let jx = lambda_objective(&x, lambda);
            let jy = lambda_objective(&y, lambda);
            for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let mixed: Vec<Vec<f64>> = x
                    .channel()
                    .iter()
                    .zip(y.channel())
                    .map(|(rx, ry)| {
                        rx.iter().zip(ry).map(|(a, b)| t * a + (1.0 - t) * b).collect()
                    })
                    .collect();
                let m = DiscreteJoint::uniform_priors(mixed).unwrap();
                let jm = lambda_objective(&m, lambda);
                prop_assert!(
                    jm >= t * jx + (1.0 - t) * jy - 1e-12,
                    "chord at t={t}: {jm} < {}", t * jx + (1.0 - t) * jy
                );
            }
            let _ = k;
        }
    }
}
