//! Labeled datasets and their class-incremental task split.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// One labeled example. `label` is the output slot, `class_id` the class in
/// the source dataset, `task` the 1-based task that owns it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub class_id: usize,
    pub task: usize,
}

/// Train and test feature rows of one class.
pub type ClassSplit = (Vec<Vec<f64>>, Vec<Vec<f64>>);

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<(Vec<f64>, usize)>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<(Vec<f64>, usize)>, num_classes: usize) -> Result<Self> {
        let feature_dim = samples
            .first()
            .map(|(x, _)| x.len())
            .ok_or(Error::Empty("dataset"))?;
        for (i, (x, label)) in samples.iter().enumerate() {
            if x.len() != feature_dim {
                return Err(Error::Data(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    x.len()
                )));
            }
            if *label >= num_classes {
                return Err(Error::Data(format!(
                    "sample {i} label {label} >= {num_classes}"
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("sample {i} has non-finite features")));
            }
        }
        Ok(LabeledDataset {
            samples,
            feature_dim,
            num_classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for (_, label) in &self.samples {
            counts[*label] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// 1-based.
    pub id: usize,
    /// Source-dataset classes in this task, in slot order.
    pub class_ids: Vec<usize>,
    /// Output slots owned by this task.
    pub slots: Range<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub class_order_seed: u64,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl TaskStream {
    /// Chunks per-class train/test data into tasks following a seeded class order.
    pub fn from_class_splits(
        per_class: Vec<ClassSplit>,
        classes_per_task: usize,
        class_order_seed: u64,
    ) -> Result<Self> {
        let num_classes = per_class.len();
        if classes_per_task == 0
            || num_classes == 0
            || !num_classes.is_multiple_of(classes_per_task)
        {
            return Err(Error::config(
                "stream.classes_per_task",
                format!("{num_classes} classes cannot be split into tasks of {classes_per_task}"),
            ));
        }
        let feature_dim = per_class
            .iter()
            .flat_map(|(tr, _)| tr.first())
            .map(|x| x.len())
            .next()
            .ok_or(Error::Empty("class data"))?;
        let order = class_order(num_classes, class_order_seed);
        let tasks = order
            .chunks(classes_per_task)
            .enumerate()
            .map(|(k, class_ids)| {
                let id = k + 1;
                let base = k * classes_per_task;
                let mut train = Vec::new();
                let mut test = Vec::new();
                for (offset, &class_id) in class_ids.iter().enumerate() {
                    let (tr, te) = &per_class[class_id];
                    let make = |x: &Vec<f64>| Sample {
                        features: x.clone(),
                        label: base + offset,
                        class_id,
                        task: id,
                    };
                    train.extend(tr.iter().map(make));
                    test.extend(te.iter().map(make));
                }
                Task {
                    id,
                    class_ids: class_ids.to_vec(),
                    slots: base..base + classes_per_task,
                    train,
                    test,
                }
            })
            .collect();
        Ok(TaskStream {
            tasks,
            class_order_seed,
            feature_dim,
            num_classes,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Per-class `(train, test)` counts keyed by source class.
    pub fn class_sample_counts(&self) -> BTreeMap<usize, (usize, usize)> {
        let mut counts = BTreeMap::new();
        for task in &self.tasks {
            for s in &task.train {
                counts.entry(s.class_id).or_insert((0, 0)).0 += 1;
            }
            for s in &task.test {
                counts.entry(s.class_id).or_insert((0, 0)).1 += 1;
            }
        }
        counts
    }
}

/// Seeded permutation of `0..num_classes`.
pub fn class_order(num_classes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobsParams {
    pub num_classes: usize,
    pub classes_per_task: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub class_order_seed: u64,
    pub data_seed: u64,
}

/// Isotropic Gaussian clusters around centers drawn uniformly from `[-1, 1]^dim`.
pub fn make_blobs_stream(p: &BlobsParams) -> Result<TaskStream> {
    if !(p.spread > 0.0) || !p.spread.is_finite() {
        return Err(Error::config("dataset.spread", "must be positive"));
    }
    if p.feature_dim == 0 || p.train_per_class == 0 || p.test_per_class == 0 {
        return Err(Error::config(
            "dataset",
            "dimensions and per-class sample counts must be positive",
        ));
    }
    if p.classes_per_task == 0 || !p.num_classes.is_multiple_of(p.classes_per_task) {
        return Err(Error::config(
            "stream.classes_per_task",
            format!(
                "{} classes are not divisible into tasks of {}",
                p.num_classes, p.classes_per_task
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.data_seed);
    let centers: Vec<Vec<f64>> = (0..p.num_classes)
        .map(|_| {
            (0..p.feature_dim)
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect()
        })
        .collect();
    let noise =
        Normal::new(0.0, p.spread).map_err(|e| Error::config("dataset.spread", e.to_string()))?;
    let per_class = centers
        .iter()
        .map(|center| {
            let mut draw = |n: usize| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| center.iter().map(|c| c + noise.sample(&mut rng)).collect())
                    .collect()
            };
            let train = draw(p.train_per_class);
            let test = draw(p.test_per_class);
            (train, test)
        })
        .collect();
    TaskStream::from_class_splits(per_class, p.classes_per_task, p.class_order_seed)
}

/// Reads `f_1,...,f_d,label` rows; blank lines and `#` comments are skipped,
/// as is a first row whose label column is not a number.
pub fn read_csv_dataset(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut samples = Vec::new();
    let mut width = None;
    let mut first = true;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let header = first
            && trimmed
                .rsplit(',')
                .next()
                .is_some_and(|l| l.trim().parse::<f64>().is_err());
        first = false;
        if header {
            width = Some(trimmed.split(',').count());
            continue;
        }
        let fail = |message: String| Error::Format {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(fail("expected at least one feature and a label".into()));
        }
        if let Some(w) = width {
            if fields.len() != w {
                return Err(fail(format!("expected {w} fields, found {}", fields.len())));
            }
        }
        width = Some(fields.len());
        let (label_field, feature_fields) = fields.split_last().expect("len >= 2");
        let label: usize = label_field.parse().map_err(|_| {
            fail(format!(
                "label `{label_field}` is not a non-negative integer"
            ))
        })?;
        let features = feature_fields
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(fail(format!("feature `{f}` is not a finite number"))),
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push((features, label));
    }
    let num_classes = samples
        .iter()
        .map(|(_, l)| l + 1)
        .max()
        .ok_or(Error::Empty("csv dataset"))?;
    LabeledDataset::new(samples, num_classes)
}

/// Stratified split: each class keeps `round(train_fraction * n)` training rows
/// (at least one row on each side).
pub fn split_dataset(
    data: &LabeledDataset,
    train_fraction: f64,
    split_seed: u64,
) -> Result<Vec<ClassSplit>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(
            "dataset.train_fraction",
            format!("{train_fraction} is outside (0, 1)"),
        ));
    }
    let mut by_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); data.num_classes];
    for (x, label) in &data.samples {
        by_class[*label].push(x.clone());
    }
    by_class
        .into_iter()
        .enumerate()
        .map(|(class, mut rows)| {
            if rows.len() < 2 {
                return Err(Error::Data(format!(
                    "class {class} has {} samples, need at least 2",
                    rows.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
            rng.set_stream(class as u64);
            rows.shuffle(&mut rng);
            let n_train =
                ((train_fraction * rows.len() as f64).round() as usize).clamp(1, rows.len() - 1);
            let test = rows.split_off(n_train);
            Ok((rows, test))
        })
        .collect()
}

pub fn load_csv_stream(
    path: &Path,
    classes_per_task: usize,
    class_order_seed: u64,
    train_fraction: f64,
    split_seed: u64,
) -> Result<TaskStream> {
    let data = read_csv_dataset(path)?;
    let per_class = split_dataset(&data, train_fraction, split_seed)?;
    TaskStream::from_class_splits(per_class, classes_per_task, class_order_seed)
}
