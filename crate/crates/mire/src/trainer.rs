//! Single-pass online training over a class-incremental stream.
//!
//! Every step follows the same skeleton: draw a replay batch (when the
//! method replays), join it with the incoming stream batch, compute the loss
//! on the joined batch plus a noise-augmented copy, add the cross-time
//! consistency penalty once (never doubled with the augmentation), take one
//! SGD step, then fold the incoming samples into replay memory and the
//! prototype table using post-step features. Methods differ only in which
//! loss terms are active and which mean estimator the evaluator reads;
//! memory and prototypes are maintained identically for all of them so every
//! method can be scored by nearest-class-mean.
//!
//! RNG discipline: one ChaCha stream drives a step's draws in a fixed order
//! (replay sample, augmentation noise, consistency class subset, reservoir
//! updates). Terms with zero weight skip both their graph nodes and their
//! draws, so a method with a term disabled is bit-identical to one that
//! never had it.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classifier::{build_means, evaluate_holdout, pooled_accuracy, MeanMode};
use crate::error::{Error, Result};
use crate::losses::{cc_penalty, mire_loss, MireParams};
use crate::memory::{MemoryEntry, ReplayMemory};
use crate::metrics::{per_dim_variance, AccuracyMatrix};
use crate::model::{Extractor, ExtractorConfig};
use crate::ndgrad::{Tape, Tensor, NORM_EPS};
use crate::prototypes::PrototypeTable;
use crate::rng::{rng_stream, STREAM_TRAIN};
use crate::stream::{Batch, HoldoutSet, SplitStream, StreamConfig, TaskLayout};

/// Which loss terms and mean estimator a method runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub replay: bool,
    pub mi_rebalance: bool,
    pub cc_penalty: bool,
    pub drift_correction: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// No replay; the loss-doubling with the augmented copy is kept so the
    /// comparison isolates replay itself.
    Finetune,
    /// Replay with the plain pair loss.
    MsNcm,
    /// Replay plus the entropy rebalancing bonus.
    Mire,
    /// Everything: entropy bonus, cross-time consistency penalty, and
    /// drift-corrected means at evaluation.
    MirePlusPlus,
    /// Ablation cell: the full objective without replay.
    MirePlusPlusNoReplay,
}

impl Method {
    pub fn spec(self) -> MethodSpec {
        match self {
            Method::Finetune => MethodSpec {
                replay: false,
                mi_rebalance: false,
                cc_penalty: false,
                drift_correction: false,
            },
            Method::MsNcm => MethodSpec {
                replay: true,
                mi_rebalance: false,
                cc_penalty: false,
                drift_correction: false,
            },
            Method::Mire => MethodSpec {
                replay: true,
                mi_rebalance: true,
                cc_penalty: false,
                drift_correction: false,
            },
            Method::MirePlusPlus => MethodSpec {
                replay: true,
                mi_rebalance: true,
                cc_penalty: true,
                drift_correction: true,
            },
            Method::MirePlusPlusNoReplay => MethodSpec {
                replay: false,
                mi_rebalance: true,
                cc_penalty: true,
                drift_correction: true,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::MsNcm => "ms-ncm",
            Method::Mire => "mire",
            Method::MirePlusPlus => "mire++",
            Method::MirePlusPlusNoReplay => "mire++-noreplay",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "finetune" => Ok(Method::Finetune),
            "ms-ncm" => Ok(Method::MsNcm),
            "mire" => Ok(Method::Mire),
            "mire++" => Ok(Method::MirePlusPlus),
            "mire++-noreplay" => Ok(Method::MirePlusPlusNoReplay),
            other => Err(Error::InvalidConfig(format!(
                "unknown method {other:?}; expected one of finetune, ms-ncm, mire, mire++, mire++-noreplay"
            ))),
        }
    }

    pub fn all() -> [Method; 4] {
        [
            Method::Finetune,
            Method::MsNcm,
            Method::Mire,
            Method::MirePlusPlus,
        ]
    }

    /// The five ablation cells: every named method plus the no-replay
    /// variant of the full objective.
    pub fn ablation_grid() -> [Method; 5] {
        [
            Method::Finetune,
            Method::MsNcm,
            Method::Mire,
            Method::MirePlusPlus,
            Method::MirePlusPlusNoReplay,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub extractor: ExtractorConfig,
    pub stream: StreamConfig,
    pub memory_capacity: usize,
    /// Replay samples joined to each incoming batch.
    pub replay_batch: usize,
    pub lr: f64,
    pub loss: MireParams,
    /// Weight on the cross-time consistency penalty.
    pub cc_weight: f64,
    /// Classes sampled per step for that penalty.
    pub cc_classes: usize,
    /// Average the penalty over feature dimensions instead of summing.
    pub cc_mean_over_dims: bool,
    pub proto_gamma: f64,
    /// Std of the gaussian input noise for the augmented copy.
    pub aug_noise: f64,
    pub holdout_fraction: f64,
    /// Master seed; the stream, holdout, weight init, and training draws all
    /// derive their own substreams from it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            extractor: ExtractorConfig::default(),
            stream: StreamConfig::default(),
            memory_capacity: 100,
            replay_batch: 10,
            lr: 0.065,
            loss: MireParams::default(),
            cc_weight: 0.01,
            cc_classes: 5,
            cc_mean_over_dims: false,
            proto_gamma: 0.99,
            aug_noise: 0.1,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.loss.ms.validate()?;
        if self.extractor.input_dim != self.stream.input_dim {
            return Err(Error::InvalidConfig(format!(
                "extractor expects {} inputs, stream provides {}",
                self.extractor.input_dim, self.stream.input_dim
            )));
        }
        if self.memory_capacity < self.stream.num_classes {
            return Err(Error::InvalidConfig(format!(
                "memory capacity {} cannot cover {} classes",
                self.memory_capacity, self.stream.num_classes
            )));
        }
        if self.replay_batch == 0 || self.cc_classes == 0 {
            return Err(Error::InvalidConfig(
                "replay batch and consistency class count must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        if self.cc_weight < 0.0 || !self.cc_weight.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "consistency weight {}",
                self.cc_weight
            )));
        }
        if self.aug_noise < 0.0 || !self.aug_noise.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "augmentation noise {}",
                self.aug_noise
            )));
        }
        if !(0.0..=1.0).contains(&self.proto_gamma) {
            return Err(Error::InvalidConfig(format!(
                "prototype retention {}",
                self.proto_gamma
            )));
        }
        Ok(())
    }

    /// Copies with every component seeded from the master seed.
    fn seeded(&self) -> TrainConfig {
        let mut cfg = self.clone();
        cfg.extractor.seed = self.seed;
        cfg.stream.seed = self.seed;
        cfg
    }
}

/// Everything that evolves during training; the unit of checkpointing.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub extractor: Extractor,
    pub memory: ReplayMemory,
    pub prototypes: PrototypeTable,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
}

/// Per-task evaluation snapshot. Accuracy rows and mean errors are recorded
/// under both estimators regardless of method, so ablations and estimator
/// comparisons read the same records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Snapshot {
    pub task: usize,
    /// Accuracy on tasks 0..=task under plain current-feature means.
    pub acc_current: Vec<f64>,
    /// Same, under drift-corrected means.
    pub acc_corrected: Vec<f64>,
    /// Mean distance from holdout-true class means, per estimator.
    pub mean_error_current: f64,
    pub mean_error_corrected: f64,
    /// Per class: feature variance averaged over dimensions, on holdout.
    pub class_feature_variance: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    /// Accuracy matrix under the method's own mean estimator.
    pub matrix: AccuracyMatrix,
    pub snapshots: Vec<Snapshot>,
    pub final_average_accuracy: f64,
    /// Present from two tasks on.
    pub final_average_forgetting: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub replayed: usize,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    method: Method,
    state: TrainerState,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, method: Method) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.seeded();
        let extractor = Extractor::new(cfg.extractor.clone())?;
        let memory = ReplayMemory::new(cfg.memory_capacity)?;
        let prototypes = PrototypeTable::new(cfg.extractor.feature_dim, cfg.proto_gamma)?;
        let rng = rng_stream(cfg.seed, STREAM_TRAIN);
        Ok(Trainer {
            cfg,
            method,
            state: TrainerState {
                extractor,
                memory,
                prototypes,
                rng,
                iteration: 0,
            },
        })
    }

    pub fn from_state(cfg: &TrainConfig, method: Method, state: TrainerState) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.seeded();
        if state.extractor.config() != &cfg.extractor {
            return Err(Error::InvalidConfig(
                "restored extractor was built from a different configuration".into(),
            ));
        }
        if state.memory.capacity() != cfg.memory_capacity {
            return Err(Error::InvalidConfig(format!(
                "restored memory capacity {} vs configured {}",
                state.memory.capacity(),
                cfg.memory_capacity
            )));
        }
        if state.prototypes.dim() != cfg.extractor.feature_dim
            || state.prototypes.gamma() != cfg.proto_gamma
        {
            return Err(Error::InvalidConfig(
                "restored prototype table does not match the configuration".into(),
            ));
        }
        Ok(Trainer {
            cfg,
            method,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    fn effective_mi_weight(&self) -> f64 {
        if self.method.spec().mi_rebalance {
            self.cfg.loss.mi_weight
        } else {
            0.0
        }
    }

    fn effective_cc_weight(&self) -> f64 {
        if self.method.spec().cc_penalty {
            self.cfg.cc_weight
        } else {
            0.0
        }
    }

    /// One optimization step on one incoming stream batch.
    pub fn step(&mut self, batch: &Batch) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training step on an empty batch".into()));
        }
        if batch.input_dim() != self.cfg.extractor.input_dim {
            return Err(Error::ShapeMismatch {
                op: "training step",
                detail: format!(
                    "batch width {} vs extractor input {}",
                    batch.input_dim(),
                    self.cfg.extractor.input_dim
                ),
            });
        }
        let spec = self.method.spec();

        // draw 1: replay
        let replayed: Vec<MemoryEntry> = if spec.replay && !self.state.memory.is_empty() {
            self.state
                .memory
                .retrieve(self.cfg.replay_batch, &mut self.state.rng)
        } else {
            Vec::new()
        };

        let dim = batch.input_dim();
        let mut xs: Vec<f64> = Vec::with_capacity((batch.len() + replayed.len()) * dim);
        let mut labels: Vec<usize> = Vec::with_capacity(batch.len() + replayed.len());
        for i in 0..batch.len() {
            xs.extend_from_slice(batch.row(i));
            labels.push(batch.labels()[i]);
        }
        for e in &replayed {
            xs.extend_from_slice(&e.x);
            labels.push(e.y);
        }
        let joined = Tensor::new(labels.len(), dim, xs)?;

        // draw 2: augmentation noise, row-major over the joined batch
        let mut aug = joined.clone();
        for v in aug.data_mut() {
            let noise: f64 = StandardNormal.sample(&mut self.state.rng);
            *v += self.cfg.aug_noise * noise;
        }

        // draw 3: consistency class subset, only when the term is live
        let cc_weight = self.effective_cc_weight();
        let cc_classes: Vec<usize> = if cc_weight > 0.0 {
            self.state
                .memory
                .class_subset(self.cfg.cc_classes, &mut self.state.rng)
        } else {
            Vec::new()
        };

        let loss_params = MireParams {
            ms: self.cfg.loss.ms,
            mi_weight: self.effective_mi_weight(),
            mi_delta: self.cfg.loss.mi_delta,
        };

        let tape = Tape::new();
        let bound = self.state.extractor.bind(&tape, true);
        let x_clean = tape.constant(joined.clone());
        let x_aug = tape.constant(aug);
        let emb_clean = self.state.extractor.embeddings(&tape, &bound, x_clean)?;
        let emb_aug = self.state.extractor.embeddings(&tape, &bound, x_aug)?;
        let loss_clean = mire_loss(&tape, emb_clean, &labels, &loss_params)?;
        let loss_aug = mire_loss(&tape, emb_aug, &labels, &loss_params)?;
        let mut loss = tape.add(loss_clean, loss_aug)?;

        // the consistency penalty enters once, not once per loss copy
        if cc_weight > 0.0 {
            for &c in &cc_classes {
                let entries = self.state.memory.class_entries(c);
                if entries.len() < 2 {
                    continue;
                }
                let mem_x = Tensor::from_rows(
                    &entries.iter().map(|e| e.x.clone()).collect::<Vec<_>>(),
                )?;
                let stored = Tensor::from_rows(
                    &entries.iter().map(|e| e.z.clone()).collect::<Vec<_>>(),
                )?;
                let mem_in = tape.constant(mem_x);
                let current = self.state.extractor.features(&tape, &bound, mem_in)?;
                if let Some(rho) =
                    cc_penalty(&tape, current, &stored, self.cfg.cc_mean_over_dims)?
                {
                    loss = tape.sub(loss, tape.scale(rho, cc_weight)?)?;
                }
            }
        }

        let loss_value = tape.scalar_value(loss)?;
        if !loss_value.is_finite() {
            let diag = self
                .state
                .extractor
                .preactivations(&joined)
                .map(|pres| {
                    pres.iter()
                        .map(|t| {
                            t.data()
                                .iter()
                                .fold(0.0f64, |m, v| m.max(v.abs()))
                                .to_string()
                        })
                        .collect::<Vec<_>>()
                        .join(", ")
                })
                .unwrap_or_else(|e| format!("preactivations unavailable: {e}"));
            return Err(Error::NonFiniteLoss {
                step: self.state.iteration,
                loss: loss_value,
                diagnostic: format!("max |preactivation| per layer: [{diag}]"),
            });
        }

        let grads = tape.backward(loss)?;
        self.state
            .extractor
            .sgd_step(&tape, &bound, &grads, self.cfg.lr);

        // post-step features of the incoming samples only; replayed entries
        // keep the features they were stored with
        let incoming = batch.to_tensor()?;
        let feats = self.state.extractor.features_value(&incoming)?;
        for i in 0..batch.len() {
            // draws 4..: reservoir decisions
            self.state.memory.insert(
                MemoryEntry {
                    x: batch.row(i).to_vec(),
                    y: batch.labels()[i],
                    z: feats.row_slice(i).to_vec(),
                },
                &mut self.state.rng,
            );
        }
        self.state.prototypes.update_batch(&feats, batch.labels())?;

        self.state.iteration += 1;
        Ok(StepStats {
            loss: loss_value,
            replayed: replayed.len(),
        })
    }

    /// Holdout-true unit feature mean per class, the reference the mean
    /// estimators are scored against.
    fn holdout_true_means(
        &self,
        holdout: &HoldoutSet,
        classes: &[usize],
    ) -> Result<BTreeMap<usize, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for &c in classes {
            let xs = holdout.class_samples(c).ok_or_else(|| {
                Error::EmptyInput(format!("holdout has no samples for class {c}"))
            })?;
            let feats = self.state.extractor.features_value(xs)?;
            let n = feats.rows() as f64;
            let mut m = vec![0.0; feats.cols()];
            for r in 0..feats.rows() {
                for (mi, v) in m.iter_mut().zip(feats.row_slice(r)) {
                    *mi += v / n;
                }
            }
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= NORM_EPS {
                return Err(Error::Domain {
                    op: "holdout_true_means",
                    detail: format!("class {c} holdout mean has no direction"),
                });
            }
            m.iter_mut().for_each(|v| *v /= norm);
            out.insert(c, m);
        }
        Ok(out)
    }

    /// Evaluates the current model after finishing `task`, under both mean
    /// estimators.
    pub fn snapshot(
        &self,
        layout: &TaskLayout,
        holdout: &HoldoutSet,
        task: usize,
    ) -> Result<Snapshot> {
        let means_current = build_means(
            &self.state.extractor,
            &self.state.memory,
            &self.state.prototypes,
            MeanMode::Current,
        )?;
        let means_corrected = build_means(
            &self.state.extractor,
            &self.state.memory,
            &self.state.prototypes,
            MeanMode::Corrected,
        )?;
        let mut acc_current = Vec::with_capacity(task + 1);
        let mut acc_corrected = Vec::with_capacity(task + 1);
        for j in 0..=task {
            let classes = &layout.task(j).classes;
            let ev_cur =
                evaluate_holdout(&self.state.extractor, &means_current, holdout, classes)?;
            let ev_cor =
                evaluate_holdout(&self.state.extractor, &means_corrected, holdout, classes)?;
            acc_current.push(pooled_accuracy(&ev_cur));
            acc_corrected.push(pooled_accuracy(&ev_cor));
        }

        let seen = layout.classes_through(task);
        let truth = self.holdout_true_means(holdout, &seen)?;
        let gather = |means: &crate::classifier::ClassMeans| -> BTreeMap<usize, Vec<f64>> {
            seen.iter()
                .filter_map(|&c| means.get(c).map(|m| (c, m.to_vec())))
                .collect()
        };
        let est_cur = gather(&means_current);
        let est_cor = gather(&means_corrected);
        let mean_error_current = crate::metrics::mean_vector_error(&est_cur, &truth)?;
        let mean_error_corrected = crate::metrics::mean_vector_error(&est_cor, &truth)?;

        let mut class_feature_variance = BTreeMap::new();
        for &c in &seen {
            let xs = holdout.class_samples(c).expect("seen classes have holdout");
            let feats = self.state.extractor.features_value(xs)?;
            let var = per_dim_variance(&feats);
            class_feature_variance
                .insert(c, var.iter().sum::<f64>() / var.len() as f64);
        }

        Ok(Snapshot {
            task,
            acc_current,
            acc_corrected,
            mean_error_current,
            mean_error_corrected,
            class_feature_variance,
        })
    }

    /// Trains over the full stream, snapshotting at every task boundary.
    pub fn run(
        cfg: &TrainConfig,
        method: Method,
        stream: &SplitStream,
        holdout: &HoldoutSet,
    ) -> Result<(RunRecord, Trainer)> {
        let mut trainer = Trainer::new(cfg, method)?;
        let layout = stream.layout();
        let mut matrix = AccuracyMatrix::new();
        let mut snapshots = Vec::with_capacity(layout.num_tasks());
        for t in 0..layout.num_tasks() {
            let (a, b) = layout.task(t).batch_range;
            for batch in &stream.batches()[a..b] {
                trainer.step(batch)?;
            }
            let snap = trainer.snapshot(layout, holdout, t)?;
            let row = if method.spec().drift_correction {
                snap.acc_corrected.clone()
            } else {
                snap.acc_current.clone()
            };
            matrix.push_row(row)?;
            snapshots.push(snap);
        }
        let final_average_accuracy = matrix.average_accuracy()?;
        let final_average_forgetting = matrix.average_forgetting().ok();
        Ok((
            RunRecord {
                method: method.as_str().to_string(),
                seed: cfg.seed,
                matrix,
                snapshots,
                final_average_accuracy,
                final_average_forgetting,
            },
            trainer,
        ))
    }

    /// Trains on task 0 only, repeating its batch sequence for the given
    /// number of epochs. Used to probe how an objective shapes features for
    /// classes it has never seen.
    pub fn run_first_task_epochs(
        cfg: &TrainConfig,
        method: Method,
        stream: &SplitStream,
        epochs: usize,
    ) -> Result<Trainer> {
        if epochs == 0 {
            return Err(Error::InvalidConfig("need at least one epoch".into()));
        }
        let mut trainer = Trainer::new(cfg, method)?;
        let (a, b) = stream.layout().task(0).batch_range;
        for _ in 0..epochs {
            for batch in &stream.batches()[a..b] {
                trainer.step(batch)?;
            }
        }
        Ok(trainer)
    }
}

/// Separability probe used by the transfer analysis: classify each listed
/// class's holdout rows against unit feature means built from the holdout
/// itself, restricted to those classes.
pub fn within_task_holdout_accuracy(
    extractor: &Extractor,
    holdout: &HoldoutSet,
    classes: &[usize],
) -> Result<f64> {
    use crate::classifier::{evaluate_features, ClassMeans, MeanProvenance};
    let mut entries = BTreeMap::new();
    let mut feats_by_class = Vec::new();
    for &c in classes {
        let xs = holdout.class_samples(c).ok_or_else(|| {
            Error::EmptyInput(format!("holdout has no samples for class {c}"))
        })?;
        let feats = extractor.features_value(xs)?;
        let n = feats.rows() as f64;
        let mut m = vec![0.0; feats.cols()];
        for r in 0..feats.rows() {
            for (mi, v) in m.iter_mut().zip(feats.row_slice(r)) {
                *mi += v / n;
            }
        }
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= NORM_EPS {
            return Err(Error::Domain {
                op: "within_task_holdout_accuracy",
                detail: format!("class {c} holdout mean has no direction"),
            });
        }
        m.iter_mut().for_each(|v| *v /= norm);
        entries.insert(c, (m, MeanProvenance::Current));
        feats_by_class.push((c, feats));
    }
    let dim = extractor.config().feature_dim;
    let means = ClassMeans::from_raw(dim, entries)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (c, feats) in feats_by_class {
        let labels = vec![c; feats.rows()];
        for (_, e) in evaluate_features(&means, &feats, &labels)? {
            correct += e.correct;
            total += e.total;
        }
    }
    Ok(correct as f64 / total as f64)
}
