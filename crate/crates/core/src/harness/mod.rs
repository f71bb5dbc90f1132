//! Class-incremental training and single-headed evaluation.

mod data;
mod metrics;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use data::{
    class_order, load_csv_stream, make_blobs_stream, read_csv_dataset, split_dataset, BlobsParams,
    ClassSplit, LabeledDataset, Sample, Task, TaskStream,
};
pub use metrics::{compute_metrics, mean_std, AccuracyMatrix, RunMetrics};

use crate::credit::{
    credit_step, CreditSettings, IterationDiagnostics, RuleKind, SampleObjective, UpdateRule,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::knowledge::{build_losses, select_subset, FunctionSet, LossWeights, MatchingScheme};
use crate::network::{predict_from_logits, MlpSpec, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scheme: MatchingScheme,
    pub rule: RuleKind,
    pub credit: CreditSettings,
    pub epochs_first: usize,
    pub epochs_rest: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Keys network initialization and mini-batch shuffling.
    pub seed: u64,
    /// Keep every n-th iteration record; 0 keeps none.
    pub log_every: usize,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: MatchingScheme::Strong,
            rule: RuleKind::sgd(0.05),
            credit: CreditSettings::default(),
            epochs_first: 40,
            epochs_rest: 40,
            batch_size: 32,
            weights: LossWeights::default(),
            seed: 0,
            log_every: 0,
            exec: Execution::default(),
        }
    }
}

/// Receives every training sample the loop reads, tagged with the task being trained.
pub trait AccessObserver {
    fn on_train_read(&mut self, training_task: usize, sample: &Sample);
}

/// Counts training reads by `(training task, owning task)`.
#[derive(Debug, Clone, Default)]
pub struct AccessLog {
    pub reads: BTreeMap<(usize, usize), usize>,
}

impl AccessLog {
    /// Reads of samples that belong to an earlier task than the one being trained.
    pub fn past_task_reads(&self) -> usize {
        self.reads
            .iter()
            .filter(|((training, owner), _)| owner < training)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn reads_during(&self, training_task: usize) -> usize {
        self.reads
            .iter()
            .filter(|((training, _), _)| *training == training_task)
            .map(|(_, n)| n)
            .sum()
    }
}

impl AccessObserver for AccessLog {
    fn on_train_read(&mut self, training_task: usize, sample: &Sample) {
        *self.reads.entry((training_task, sample.task)).or_default() += 1;
    }
}

/// One logged optimizer iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub task: usize,
    pub iteration: usize,
    pub conflicts: usize,
    pub degenerate_pairs: usize,
    pub mean_phi: Option<f64>,
    pub ce_loss: f64,
    /// KL terms summed over the matched subset.
    pub kl_total: f64,
    pub losses: BTreeMap<String, f64>,
}

impl IterationRecord {
    fn new(task: usize, iteration: usize, d: &IterationDiagnostics) -> Self {
        let losses: BTreeMap<String, f64> = d
            .labels
            .iter()
            .cloned()
            .zip(d.losses.iter().copied())
            .collect();
        IterationRecord {
            task,
            iteration,
            conflicts: d.conflicts,
            degenerate_pairs: d.degenerate_pairs,
            mean_phi: d.mean_phi,
            ce_loss: losses.get("ce").copied().unwrap_or(0.0),
            kl_total: d
                .labels
                .iter()
                .zip(&d.losses)
                .filter(|(l, _)| l.starts_with("kl_"))
                .map(|(_, v)| v)
                .sum(),
            losses,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub accuracy: AccuracyMatrix,
    pub metrics: RunMetrics,
    pub log: Vec<IterationRecord>,
    pub iterations: usize,
    pub total_conflicts: usize,
    /// Matched functions per task, 1-based task numbers.
    pub subsets: Vec<Vec<usize>>,
    pub snapshot_digests: Vec<String>,
}

/// Accuracy over `samples` by argmax across the first `seen` outputs.
pub fn evaluate(net: &Network, samples: &[Sample], seen: usize, exec: Execution) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let hits = exec.map(samples, |s| -> Result<bool> {
        Ok(predict_from_logits(&net.forward(&s.features)?, seen)? == s.label)
    });
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains on each task in turn, snapshotting after every task and filling the
/// accuracy matrix without task identity at evaluation time.
pub fn run_continual(
    stream: &TaskStream,
    spec: &MlpSpec,
    cfg: &TrainConfig,
    mut observer: Option<&mut dyn AccessObserver>,
) -> Result<RunResult> {
    if stream.tasks.is_empty() {
        return Err(Error::Empty("task stream"));
    }
    if spec.input_dim != stream.feature_dim {
        return Err(Error::dim(spec.input_dim, stream.feature_dim));
    }
    let total_slots = stream.tasks.last().map(|t| t.slots.end).unwrap_or(0);
    if spec.total_classes != total_slots {
        return Err(Error::config(
            "model.total_classes",
            format!(
                "network has {} outputs, stream has {total_slots} classes",
                spec.total_classes
            ),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("training.batch_size", "must be positive"));
    }
    cfg.scheme.validate()?;

    let mut net = Network::init(spec.clone(), cfg.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut functions = FunctionSet::new();
    let mut accuracy = AccuracyMatrix::new(stream.num_tasks());
    let mut log = Vec::new();
    let mut iteration = 0usize;
    let mut total_conflicts = 0usize;
    let mut subsets = Vec::with_capacity(stream.num_tasks());

    for (k, task) in stream.tasks.iter().enumerate() {
        let t = task.id;
        let subset = if t == 1 {
            Vec::new()
        } else {
            select_subset(&functions, &cfg.scheme, t)?
        };
        let epochs = if t == 1 {
            cfg.epochs_first
        } else {
            cfg.epochs_rest
        };
        let mut rule = UpdateRule::new(cfg.rule, net.params().len())?;
        let mut order: Vec<usize> = (0..task.train.len()).collect();

        for _ in 0..epochs {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.batch_size) {
                let samples: Vec<&Sample> = chunk.iter().map(|&i| &task.train[i]).collect();
                if let Some(obs) = observer.as_deref_mut() {
                    for s in &samples {
                        obs.on_train_read(t, s);
                    }
                }
                let batch = cfg
                    .exec
                    .map(&samples, |s| -> Result<SampleObjective> {
                        Ok(SampleObjective {
                            x: s.features.clone(),
                            components: build_losses(
                                &functions,
                                &subset,
                                &s.features,
                                s.label,
                                task.slots.clone(),
                                &cfg.weights,
                            )?,
                        })
                    })
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                let diag = credit_step(&mut rule, &mut net, &batch, cfg.credit, cfg.exec).map_err(
                    |e| Error::Diverged {
                        task: t,
                        iteration,
                        message: e.to_string(),
                    },
                )?;
                if diag.losses.iter().any(|l| !l.is_finite()) {
                    return Err(Error::Diverged {
                        task: t,
                        iteration,
                        message: "non-finite loss".into(),
                    });
                }
                total_conflicts += diag.conflicts;
                if cfg.log_every > 0 && iteration.is_multiple_of(cfg.log_every) {
                    log.push(IterationRecord::new(t, iteration, &diag));
                }
                iteration += 1;
            }
        }

        functions.push(net.snapshot(0..task.slots.end)?)?;
        for (j, past) in stream.tasks[..=k].iter().enumerate() {
            accuracy.set(k, j, evaluate(&net, &past.test, task.slots.end, cfg.exec)?)?;
        }
        subsets.push(subset);
    }

    let metrics = compute_metrics(&accuracy)?;
    Ok(RunResult {
        accuracy,
        metrics,
        log,
        iterations: iteration,
        total_conflicts,
        subsets,
        snapshot_digests: functions.iter().map(|s| s.params_digest()).collect(),
    })
}
