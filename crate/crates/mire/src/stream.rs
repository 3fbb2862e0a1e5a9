//! Class-incremental data streams. A stream is an ordered list of minibatches
//! plus an evaluator-side task layout; batches carry no task identifiers, so
//! the learner sees one uninterrupted single-pass sequence and only the
//! evaluation harness knows where task boundaries fall.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::{rng_stream, STREAM_DATA, STREAM_HOLDOUT};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StreamConfig {
    pub num_classes: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Typical distance between class means, in units of the per-dimension
    /// noise std (which is 1). Means sit at `separation / sqrt(2)` from the
    /// origin in random directions, so a typical pair of near-orthogonal
    /// means is `separation` apart.
    pub separation: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            num_classes: 10,
            classes_per_task: 2,
            samples_per_class: 200,
            input_dim: 16,
            separation: 6.0,
            batch_size: 10,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.classes_per_task == 0
            || self.samples_per_class == 0
            || self.input_dim == 0
            || self.batch_size == 0
        {
            return Err(Error::InvalidConfig(
                "stream sizes must all be positive".into(),
            ));
        }
        if self.num_classes % self.classes_per_task != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} classes do not split into tasks of {}",
                self.num_classes, self.classes_per_task
            )));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(Error::InvalidConfig("separation must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.num_classes / self.classes_per_task
    }
}

/// One labeled input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// A minibatch: flat row-major inputs plus labels, no task information.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    input_dim: usize,
    xs: Vec<f64>,
    ys: Vec<usize>,
}

impl Batch {
    pub fn new(input_dim: usize) -> Self {
        Batch {
            input_dim,
            xs: Vec::new(),
            ys: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], y: usize) {
        debug_assert_eq!(x.len(), self.input_dim);
        self.xs.extend_from_slice(x);
        self.ys.push(y);
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.ys
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.xs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.len(), self.input_dim, self.xs.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInfo {
    pub classes: Vec<usize>,
    /// Half-open range into the stream's batch list.
    pub batch_range: (usize, usize),
}

/// Evaluator-side view: which classes make up each task and where each task's
/// batches sit in the stream. The learner never receives this.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLayout {
    tasks: Vec<TaskInfo>,
    /// Input-space class means for synthetic data; empty for file datasets.
    class_means: Vec<Vec<f64>>,
}

impl TaskLayout {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, j: usize) -> &TaskInfo {
        &self.tasks[j]
    }

    pub fn tasks(&self) -> &[TaskInfo] {
        &self.tasks
    }

    /// Classes seen once tasks 0..=j have been learned, ascending.
    pub fn classes_through(&self, j: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.tasks[..=j]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }
}

/// An ordered single-pass stream plus its evaluator-side layout.
#[derive(Debug, Clone)]
pub struct SplitStream {
    input_dim: usize,
    batches: Vec<Batch>,
    layout: TaskLayout,
}

impl SplitStream {
    /// Learner-facing view: batches in order, each exactly once, no task ids.
    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Evaluator-only access.
    pub fn layout(&self) -> &TaskLayout {
        &self.layout
    }
}

/// Per-class evaluation sets, disjoint from every training sample.
#[derive(Debug, Clone)]
pub struct HoldoutSet {
    input_dim: usize,
    per_class: BTreeMap<usize, Tensor>,
}

impl HoldoutSet {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.keys().copied()
    }

    pub fn class_samples(&self, class: usize) -> Option<&Tensor> {
        self.per_class.get(&class)
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(|t| t.rows()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn synthetic_class_means(cfg: &StreamConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // radius s/sqrt(2) puts a typical pair of random directions s apart
    let radius = cfg.separation / 2f64.sqrt();
    (0..cfg.num_classes)
        .map(|_| {
            unit_direction(rng, cfg.input_dim)
                .into_iter()
                .map(|u| u * radius)
                .collect()
        })
        .collect()
}

fn gaussian_sample(mean: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter()
        .map(|&m| {
            let noise: f64 = StandardNormal.sample(rng);
            m + noise
        })
        .collect()
}

/// Synthetic split benchmark: each class is an isotropic unit-covariance
/// Gaussian whose mean is a random direction scaled so that a typical pair
/// of class means is `separation` apart; classes arrive in ascending id
/// order, `classes_per_task` at a time. Within a task
/// the pooled samples are shuffled and chunked; a trailing partial batch is
/// emitted, and batches never span task boundaries.
pub fn make_split_synthetic(cfg: &StreamConfig) -> Result<SplitStream> {
    cfg.validate()?;
    let mut rng = rng_stream(cfg.seed, STREAM_DATA);
    let means = synthetic_class_means(cfg, &mut rng);

    let mut batches = Vec::new();
    let mut tasks = Vec::new();
    for t in 0..cfg.num_tasks() {
        let classes: Vec<usize> =
            (t * cfg.classes_per_task..(t + 1) * cfg.classes_per_task).collect();
        let mut pool: Vec<Sample> = Vec::with_capacity(classes.len() * cfg.samples_per_class);
        for &c in &classes {
            for _ in 0..cfg.samples_per_class {
                pool.push(Sample {
                    x: gaussian_sample(&means[c], &mut rng),
                    y: c,
                });
            }
        }
        pool.shuffle(&mut rng);
        let start = batches.len();
        push_chunked(&mut batches, &pool, cfg.input_dim, cfg.batch_size);
        tasks.push(TaskInfo {
            classes,
            batch_range: (start, batches.len()),
        });
    }
    Ok(SplitStream {
        input_dim: cfg.input_dim,
        batches,
        layout: TaskLayout {
            tasks,
            class_means: means,
        },
    })
}

/// Fresh evaluation draws from the same class distributions, one set per
/// class; disjoint from training by construction (an independent RNG stream).
/// `fraction` is relative to `samples_per_class` and must lie in (0, 0.5].
pub fn holdout_synthetic(cfg: &StreamConfig, fraction: f64) -> Result<HoldoutSet> {
    cfg.validate()?;
    validate_fraction(fraction)?;
    let per_class_n = holdout_count(cfg.samples_per_class, fraction)?;
    // means are re-derived from the data stream so they match the training draw
    let mut data_rng = rng_stream(cfg.seed, STREAM_DATA);
    let means = synthetic_class_means(cfg, &mut data_rng);
    let mut rng = rng_stream(cfg.seed, STREAM_HOLDOUT);
    let mut per_class = BTreeMap::new();
    for (c, mean) in means.iter().enumerate() {
        let mut flat = Vec::with_capacity(per_class_n * cfg.input_dim);
        for _ in 0..per_class_n {
            flat.extend(gaussian_sample(mean, &mut rng));
        }
        per_class.insert(c, Tensor::new(per_class_n, cfg.input_dim, flat)?);
    }
    Ok(HoldoutSet {
        input_dim: cfg.input_dim,
        per_class,
    })
}

fn validate_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction {fraction} outside (0, 0.5]"
        )));
    }
    Ok(())
}

fn holdout_count(per_class: usize, fraction: f64) -> Result<usize> {
    let n = (fraction * per_class as f64).round() as usize;
    if n == 0 {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction {fraction} of {per_class} samples rounds to zero"
        )));
    }
    Ok(n.min(per_class))
}

fn push_chunked(batches: &mut Vec<Batch>, pool: &[Sample], input_dim: usize, batch_size: usize) {
    for chunk in pool.chunks(batch_size) {
        let mut b = Batch::new(input_dim);
        for s in chunk {
            b.push(&s.x, s.y);
        }
        batches.push(b);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CsvConfig {
    pub input_dim: usize,
    pub classes_per_task: usize,
    pub batch_size: usize,
    pub skip_header: bool,
    /// Carved out of the file's rows per class before batching.
    pub holdout_fraction: f64,
    pub seed: u64,
}

/// Parses `label,f1,...,fd` rows. Labels must be contiguous 0-based class
/// ids; every row must carry exactly `input_dim` features. Surrounding
/// whitespace is tolerated; anything else is rejected with its line number.
pub fn load_csv_dataset(path: &Path, cfg: &CsvConfig) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if idx == 0 && cfg.skip_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cfg.input_dim + 1 {
            return Err(Error::Csv {
                line: line_no,
                reason: format!(
                    "expected label plus {} features, found {} fields",
                    cfg.input_dim,
                    fields.len()
                ),
            });
        }
        let y: usize = fields[0].trim().parse().map_err(|_| Error::Csv {
            line: line_no,
            reason: format!("label {:?} is not a non-negative integer", fields[0].trim()),
        })?;
        let mut x = Vec::with_capacity(cfg.input_dim);
        for f in &fields[1..] {
            let v: f64 = f.trim().parse().map_err(|_| Error::Csv {
                line: line_no,
                reason: format!("feature {:?} is not a number", f.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    line: line_no,
                    reason: format!("feature {v} is not finite"),
                });
            }
            x.push(v);
        }
        samples.push(Sample { x, y });
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput(format!("{}", path.display())));
    }
    let mut seen: Vec<usize> = samples.iter().map(|s| s.y).collect();
    seen.sort_unstable();
    seen.dedup();
    let max = *seen.last().expect("nonempty");
    if seen.len() != max + 1 {
        return Err(Error::InvalidConfig(format!(
            "labels are not contiguous 0-based ids: saw {seen:?}"
        )));
    }
    Ok(samples)
}

/// Splits file samples into a class-incremental stream plus a carved-out
/// holdout. Tasks group ascending label ids, `classes_per_task` at a time;
/// the holdout is removed per class before batching so eval and train rows
/// are disjoint.
pub fn make_split_from_csv(path: &Path, cfg: &CsvConfig) -> Result<(SplitStream, HoldoutSet)> {
    if cfg.input_dim == 0 || cfg.classes_per_task == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("csv stream sizes must be positive".into()));
    }
    validate_fraction(cfg.holdout_fraction)?;
    let samples = load_csv_dataset(path, cfg)?;
    let num_classes = samples.iter().map(|s| s.y).max().expect("nonempty") + 1;
    if num_classes % cfg.classes_per_task != 0 {
        return Err(Error::InvalidConfig(format!(
            "{num_classes} classes do not split into tasks of {}",
            cfg.classes_per_task
        )));
    }

    let mut by_class: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in &samples {
        by_class.entry(s.y).or_default().push(s);
    }

    let mut holdout_rng = rng_stream(cfg.seed, STREAM_HOLDOUT);
    let mut train: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    let mut per_class_eval = BTreeMap::new();
    for (&c, rows) in &by_class {
        let n_eval = holdout_count(rows.len(), cfg.holdout_fraction)?;
        if n_eval >= rows.len() {
            return Err(Error::InvalidConfig(format!(
                "class {c} has {} rows, too few to carve {n_eval} eval rows",
                rows.len()
            )));
        }
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.shuffle(&mut holdout_rng);
        let (eval_idx, train_idx) = idx.split_at(n_eval);
        let mut flat = Vec::with_capacity(n_eval * cfg.input_dim);
        let mut eval_sorted = eval_idx.to_vec();
        eval_sorted.sort_unstable();
        for &i in &eval_sorted {
            flat.extend_from_slice(&rows[i].x);
        }
        per_class_eval.insert(c, Tensor::new(n_eval, cfg.input_dim, flat)?);
        let mut train_sorted = train_idx.to_vec();
        train_sorted.sort_unstable();
        train.insert(c, train_sorted.iter().map(|&i| rows[i]).collect());
    }

    let mut data_rng = rng_stream(cfg.seed, STREAM_DATA);
    let mut batches = Vec::new();
    let mut tasks = Vec::new();
    let num_tasks = num_classes / cfg.classes_per_task;
    for t in 0..num_tasks {
        let classes: Vec<usize> =
            (t * cfg.classes_per_task..(t + 1) * cfg.classes_per_task).collect();
        let mut pool: Vec<Sample> = Vec::new();
        for &c in &classes {
            for s in &train[&c] {
                pool.push((*s).clone());
            }
        }
        pool.shuffle(&mut data_rng);
        let start = batches.len();
        push_chunked(&mut batches, &pool, cfg.input_dim, cfg.batch_size);
        tasks.push(TaskInfo {
            classes,
            batch_range: (start, batches.len()),
        });
    }
    Ok((
        SplitStream {
            input_dim: cfg.input_dim,
            batches,
            layout: TaskLayout {
                tasks,
                class_means: Vec::new(),
            },
        },
        HoldoutSet {
            input_dim: cfg.input_dim,
            per_class: per_class_eval,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn small_cfg(seed: u64) -> StreamConfig {
        StreamConfig {
            num_classes: 6,
            classes_per_task: 2,
            samples_per_class: 23,
            input_dim: 4,
            separation: 4.0,
            batch_size: 5,
            seed,
        }
    }

    #[test]
    fn default_shape_matches_benchmark() {
        let cfg = StreamConfig::default();
        let s = make_split_synthetic(&cfg).unwrap();
        assert_eq!(s.layout().num_tasks(), 5);
        // 2 classes x 200 samples / batch 10 = 40 batches per task
        for t in s.layout().tasks() {
            assert_eq!(t.batch_range.1 - t.batch_range.0, 40);
            assert_eq!(t.classes.len(), 2);
        }
        assert_eq!(s.batches().len(), 200);
    }

    #[test]
    fn trailing_partial_batch_is_emitted() {
        // 2 classes x 23 = 46 samples per task, batch 5 -> 9 full + 1 of size 1
        let s = make_split_synthetic(&small_cfg(3)).unwrap();
        let (a, b) = s.layout().task(0).batch_range;
        let sizes: Vec<usize> = s.batches()[a..b].iter().map(|x| x.len()).collect();
        assert_eq!(sizes.len(), 10);
        assert_eq!(*sizes.last().unwrap(), 1);
        assert_eq!(sizes.iter().sum::<usize>(), 46);
    }

    #[test]
    fn batches_carry_no_future_classes() {
        let s = make_split_synthetic(&small_cfg(7)).unwrap();
        for (j, t) in s.layout().tasks().iter().enumerate() {
            for b in &s.batches()[t.batch_range.0..t.batch_range.1] {
                for &y in b.labels() {
                    assert!(
                        t.classes.contains(&y),
                        "task {j} batch contains class {y}"
                    );
                }
            }
        }
    }

    #[test]
    fn stream_is_reproducible_and_seed_sensitive() {
        let a = make_split_synthetic(&small_cfg(9)).unwrap();
        let b = make_split_synthetic(&small_cfg(9)).unwrap();
        let c = make_split_synthetic(&small_cfg(10)).unwrap();
        assert_eq!(a.batches(), b.batches());
        assert_ne!(a.batches(), c.batches());
    }

    #[test]
    fn holdout_counts_and_disjointness() {
        let cfg = StreamConfig::default();
        let h = holdout_synthetic(&cfg, 0.2).unwrap();
        assert_eq!(h.classes().count(), 10);
        for c in h.classes() {
            assert_eq!(h.class_samples(c).unwrap().rows(), 40);
        }
        // default synthetic keeps at least 20 eval samples per class
        assert!(h.class_samples(0).unwrap().rows() >= 20);
        // no eval row equals any training row
        let s = make_split_synthetic(&cfg).unwrap();
        let train: std::collections::HashSet<Vec<u64>> = s
            .batches()
            .iter()
            .flat_map(|b| {
                (0..b.len()).map(|i| b.row(i).iter().map(|v| v.to_bits()).collect())
            })
            .collect();
        for c in h.classes() {
            let t = h.class_samples(c).unwrap();
            for r in 0..t.rows() {
                let key: Vec<u64> = t.row_slice(r).iter().map(|v| v.to_bits()).collect();
                assert!(!train.contains(&key));
            }
        }
    }

    #[test]
    fn holdout_fraction_bounds() {
        let cfg = StreamConfig::default();
        assert!(holdout_synthetic(&cfg, 0.0).is_err());
        assert!(holdout_synthetic(&cfg, 0.51).is_err());
        assert!(holdout_synthetic(&cfg, 0.5).is_ok());
    }

    #[test]
    fn eval_means_concentrate_around_configured_means() {
        let cfg = StreamConfig::default();
        let h = holdout_synthetic(&cfg, 0.2).unwrap();
        let s = make_split_synthetic(&cfg).unwrap();
        let means = s.layout().class_means();
        for c in 0..cfg.num_classes {
            let t = h.class_samples(c).unwrap();
            let n = t.rows() as f64;
            let d = cfg.input_dim;
            let mut m = vec![0.0; d];
            for r in 0..t.rows() {
                for (mi, v) in m.iter_mut().zip(t.row_slice(r)) {
                    *mi += v / n;
                }
            }
            let dist: f64 = m
                .iter()
                .zip(&means[c])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            // vector mean concentrates at sqrt(d/n); allow 3x
            let bound = 3.0 * (d as f64 / n).sqrt();
            assert!(dist <= bound, "class {c}: {dist} > {bound}");
        }
    }

    #[test]
    fn well_separated_classes_are_ncm_separable_in_input_space() {
        // separation 8 in d=16: nearest-true-mean classification of held-out
        // draws should exceed 99% accuracy
        let cfg = StreamConfig {
            separation: 8.0,
            ..StreamConfig::default()
        };
        let h = holdout_synthetic(&cfg, 0.2).unwrap();
        let s = make_split_synthetic(&cfg).unwrap();
        let means = s.layout().class_means();
        let mut correct = 0usize;
        let mut total = 0usize;
        for c in h.classes() {
            let t = h.class_samples(c).unwrap();
            for r in 0..t.rows() {
                let x = t.row_slice(r);
                let pred = means
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da: f64 = x.iter().zip(*a).map(|(u, v)| (u - v) * (u - v)).sum();
                        let db: f64 = x.iter().zip(*b).map(|(u, v)| (u - v) * (u - v)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                correct += (pred == c) as usize;
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.99, "input-space NCM accuracy {acc}");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "label,f1,f2").unwrap();
        writeln!(f, "0, 0.5, 1.0").unwrap();
        writeln!(f, "0,0.25,0.75").unwrap();
        writeln!(f, "1,2.0,3.5").unwrap();
        writeln!(f, "1,2.5,3.0").unwrap();
        drop(f);
        let cfg = CsvConfig {
            input_dim: 2,
            classes_per_task: 1,
            batch_size: 1,
            skip_header: true,
            holdout_fraction: 0.5,
            seed: 0,
        };
        let samples = load_csv_dataset(&path, &cfg).unwrap();
        assert_eq!(samples.len(), 4);
        assert_eq!(samples[0], Sample { x: vec![0.5, 1.0], y: 0 });

        // header not skipped -> parse error names line 1
        let bad = load_csv_dataset(
            &path,
            &CsvConfig {
                skip_header: false,
                ..cfg.clone()
            },
        );
        match bad {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected csv error, got {other:?}"),
        }

        let (stream, holdout) = make_split_from_csv(&path, &cfg).unwrap();
        assert_eq!(stream.layout().num_tasks(), 2);
        assert_eq!(holdout.len(), 2);
        // one train + one eval row per class, disjoint
        assert_eq!(stream.batches().iter().map(|b| b.len()).sum::<usize>(), 2);
    }

    #[test]
    fn csv_rejects_non_contiguous_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gap.csv");
        std::fs::write(&path, "0,1.0\n2,2.0\n").unwrap();
        let cfg = CsvConfig {
            input_dim: 1,
            classes_per_task: 1,
            batch_size: 1,
            skip_header: false,
            holdout_fraction: 0.5,
            seed: 0,
        };
        assert!(matches!(
            load_csv_dataset(&path, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn csv_rejects_wrong_arity_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arity.csv");
        std::fs::write(&path, "0,1.0,2.0\n1,3.0\n").unwrap();
        let cfg = CsvConfig {
            input_dim: 2,
            classes_per_task: 1,
            batch_size: 1,
            skip_header: false,
            holdout_fraction: 0.5,
            seed: 0,
        };
        match load_csv_dataset(&path, &cfg) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected csv error, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn every_sample_appears_exactly_once(
            seed in 0u64..1000,
            classes_per_task in 1usize..4,
            tasks in 1usize..4,
            spc in 1usize..40,
            batch in 1usize..8,
        ) {
            let cfg = StreamConfig {
                num_classes: classes_per_task * tasks,
                classes_per_task,
                samples_per_class: spc,
                input_dim: 3,
                separation: 2.0,
                batch_size: batch,
                seed,
            };
            let s = make_split_synthetic(&cfg).unwrap();
            let mut per_class = BTreeMap::new();
            let mut keys = std::collections::HashSet::new();
            for b in s.batches() {
                for i in 0..b.len() {
                    *per_class.entry(b.labels()[i]).or_insert(0usize) += 1;
                    let key: Vec<u64> = b.row(i).iter().map(|v| v.to_bits()).collect();
                    prop_assert!(keys.insert(key), "duplicate sample emitted");
                }
            }
            prop_assert_eq!(per_class.len(), cfg.num_classes);
            for (_, n) in per_class {
                prop_assert_eq!(n, spc);
            }
        }
    }
}
