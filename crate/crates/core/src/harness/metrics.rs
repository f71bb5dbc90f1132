use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `R[i][j]`: accuracy on task `j` after training task `i` (0-based here).
/// Only the lower triangle `j <= i` is meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            cells: vec![vec![None; tasks]; tasks],
        }
    }

    /// Builds a matrix from its lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let t = rows.len();
        let mut m = AccuracyMatrix::new(t);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::dim(i + 1, row.len()));
            }
            for (j, v) in row.into_iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.cells.len()
    }

    pub fn set(&mut self, after: usize, task: usize, accuracy: f64) -> Result<()> {
        let t = self.tasks();
        if after >= t || task > after {
            return Err(Error::Index {
                index: task,
                len: after + 1,
            });
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Numeric(format!(
                "accuracy {accuracy} outside [0, 1]"
            )));
        }
        self.cells[after][task] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.cells.get(after)?.get(task).copied().flatten()
    }

    /// `after_task,acc_task_1,...` with six decimals and blanks above the diagonal.
    pub fn to_csv(&self) -> String {
        let t = self.tasks();
        let mut out = String::from("after_task");
        for j in 1..=t {
            write!(out, ",acc_task_{j}").unwrap();
        }
        out.push('\n');
        for (i, row) in self.cells.iter().enumerate() {
            write!(out, "{}", i + 1).unwrap();
            for cell in row {
                match cell {
                    Some(v) => write!(out, ",{v:.6}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Average incremental accuracy.
    pub avg: f64,
    /// Mean per-task accuracy after the final task.
    pub last: f64,
    /// Accuracy on the first task after each task.
    pub first_task_curve: Vec<f64>,
    pub final_per_task: Vec<f64>,
}

pub fn compute_metrics(r: &AccuracyMatrix) -> Result<RunMetrics> {
    let t = r.tasks();
    if t == 0 {
        return Err(Error::State("empty accuracy matrix".into()));
    }
    let cell = |i: usize, j: usize| {
        r.get(i, j).ok_or_else(|| {
            Error::State(format!(
                "accuracy after task {} on task {} is missing",
                i + 1,
                j + 1
            ))
        })
    };
    let mut stage_means = Vec::with_capacity(t);
    for i in 0..t {
        let mut sum = 0.0;
        for j in 0..=i {
            sum += cell(i, j)?;
        }
        stage_means.push(sum / (i + 1) as f64);
    }
    let avg = stage_means.iter().sum::<f64>() / t as f64;
    let final_per_task = (0..t).map(|j| cell(t - 1, j)).collect::<Result<Vec<_>>>()?;
    let last = final_per_task.iter().sum::<f64>() / t as f64;
    let first_task_curve = (0..t).map(|i| cell(i, 0)).collect::<Result<Vec<_>>>()?;
    Ok(RunMetrics {
        avg,
        last,
        first_task_curve,
        final_per_task,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
