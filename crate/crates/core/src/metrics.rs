//! Accuracy matrices, final average accuracy, forgetting and prompt-retrieval
//! confusion.

use crate::error::{Error, Result};
use crate::trainer::{TaskStream, Trainer};
use crate::ClassId;

/// `a[t][j]`: accuracy on task `j` after training task `t` (`j ≤ t`).
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

/// One test-set prediction, recorded after training `after_task`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictionRecord {
    pub after_task: usize,
    pub task: usize,
    pub label: ClassId,
    pub predicted: ClassId,
}

impl AccuracyMatrix {
    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (t, r) in rows.iter().enumerate() {
            if r.len() != t + 1 {
                return Err(Error::shape(
                    "accuracy_matrix",
                    format!("row {t} has {} entries, expected {}", r.len(), t + 1),
                ));
            }
            if let Some(v) = r.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Config(format!("accuracy {v} outside [0, 1]")));
            }
        }
        Ok(Self { rows })
    }

    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    /// Appends the row measured after the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let mut rows = self.rows.clone();
        rows.push(row);
        *self = Self::from_rows(rows)?;
        Ok(())
    }

    /// Per-cell hit rate over a prediction log covering `tasks` tasks.
    pub fn from_log(log: &[PredictionRecord], tasks: usize) -> Result<Self> {
        let mut hits = vec![vec![(0usize, 0usize); tasks]; tasks];
        for r in log {
            if r.task > r.after_task || r.after_task >= tasks {
                return Err(Error::Config(format!(
                    "prediction for task {} after task {} outside a {tasks}-task log",
                    r.task, r.after_task
                )));
            }
            let cell = &mut hits[r.after_task][r.task];
            cell.0 += usize::from(r.label == r.predicted);
            cell.1 += 1;
        }
        let rows = (0..tasks)
            .map(|t| {
                (0..=t)
                    .map(|j| {
                        let (h, n) = hits[t][j];
                        if n == 0 {
                            Err(Error::Config(format!(
                                "no predictions for task {j} after task {t}"
                            )))
                        } else {
                            Ok(h as f64 / n as f64)
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.rows.get(after)?.get(task).copied()
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Final Average Accuracy: mean of the last row.
pub fn faa(a: &AccuracyMatrix) -> Result<f64> {
    let last = a
        .rows
        .last()
        .ok_or_else(|| Error::Undefined("FAA of an empty accuracy matrix".into()))?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Final Forgetting: mean over `j < T` of `max_{t<T} a[t][j] − a[T][j]`,
/// each term floored at zero so that a task whose accuracy never dropped
/// counts as no forgetting.
pub fn final_forgetting(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.tasks();
    if t < 2 {
        return Err(Error::Undefined(
            "final forgetting needs at least two tasks".into(),
        ));
    }
    let last = &a.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|j| {
            let peak = (j..t - 1)
                .map(|s| a.rows[s][j])
                .fold(f64::NEG_INFINITY, f64::max);
            (peak - last[j]).max(0.0)
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `C[i][j]`: fraction of task-`i` test queries whose selected key belongs to
/// task `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalConfusion {
    pub after_task: usize,
    pub matrix: Vec<Vec<f64>>,
}

impl RetrievalConfusion {
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.matrix.len()).map(|i| self.matrix[i][i]).collect()
    }
}

/// Runs prompt selection on the test queries of tasks `0..=at_task`.
pub fn retrieval_confusion(
    trainer: &Trainer,
    stream: &TaskStream,
    at_task: usize,
) -> Result<RetrievalConfusion> {
    if at_task >= trainer.tasks_done() || at_task >= stream.len() {
        return Err(Error::UnknownTask(at_task));
    }
    let n = at_task + 1;
    let mut matrix = vec![vec![0.0; n]; n];
    for (i, row) in matrix.iter_mut().enumerate() {
        let task = &stream.tasks[i];
        if task.test_x.is_empty() {
            return Err(Error::EmptyTask(i));
        }
        for x in &task.test_x {
            let sel = trainer.retrieve(x)?;
            let owner = trainer.books.task_of(sel.index);
            if owner >= n {
                return Err(Error::UnknownTask(owner));
            }
            row[owner] += 1.0;
        }
        let count = task.test_x.len() as f64;
        row.iter_mut().for_each(|v| *v /= count);
    }
    Ok(RetrievalConfusion {
        after_task: at_task,
        matrix,
    })
}
