//! CSV and JSON emission of run results.
//!
//! Files written by [`write_run`] into the output directory:
//!
//! - `accuracy_seed{S}.csv`: header `after_task,task_0,…,task_{T-1}`; row `t`
//!   holds `a[t][j]` for `j ≤ t` and empty cells above the diagonal.
//! - `retrieval_seed{S}.csv`: header `after_task,query_task,key_task_0,…`;
//!   one row per (checkpoint, query task) of every retrieval confusion matrix.
//! - `summary.json`: see [`Summary`].
//!
//! Floats are printed with six decimals.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AccuracyMatrix, RetrievalConfusion};

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

pub fn accuracy_csv(a: &AccuracyMatrix) -> String {
    let t = a.tasks();
    let mut out = String::from("after_task");
    for j in 0..t {
        out.push_str(&format!(",task_{j}"));
    }
    out.push('\n');
    for (i, row) in a.rows().iter().enumerate() {
        out.push_str(&i.to_string());
        for j in 0..t {
            out.push(',');
            if let Some(v) = row.get(j) {
                out.push_str(&f6(*v));
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_accuracy_csv(text: &str) -> Result<AccuracyMatrix> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty accuracy CSV".into()))?;
    if !header.starts_with("after_task") {
        return Err(Error::Format(format!(
            "unexpected accuracy header `{header}`"
        )));
    }
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .skip(1)
                .filter(|c| !c.is_empty())
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad accuracy cell `{c}`")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    AccuracyMatrix::from_rows(rows)
}

pub fn retrieval_csv(confusions: &[RetrievalConfusion]) -> String {
    let width = confusions.iter().map(|c| c.matrix.len()).max().unwrap_or(0);
    let mut out = String::from("after_task,query_task");
    for j in 0..width {
        out.push_str(&format!(",key_task_{j}"));
    }
    out.push('\n');
    for c in confusions {
        for (i, row) in c.matrix.iter().enumerate() {
            out.push_str(&format!("{},{i}", c.after_task));
            for j in 0..width {
                out.push(',');
                if let Some(v) = row.get(j) {
                    out.push_str(&f6(*v));
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Mean and population standard deviation across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Class ids in training order.
    pub class_order: Vec<usize>,
    pub faa: f64,
    /// Absent for single-task runs.
    pub final_forgetting: Option<f64>,
    /// Retrieval precision of task-0 queries after every task.
    pub task1_retrieval_precision: Vec<f64>,
    /// Smallest diagonal entry of the final retrieval confusion matrix.
    pub final_retrieval_min_diagonal: f64,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: String,
    pub scenario: String,
    pub tasks: usize,
    pub seeds: Vec<SeedSummary>,
    pub faa: Aggregate,
    /// Absent for single-task runs.
    pub final_forgetting: Option<Aggregate>,
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn summary_json(summary: &Summary) -> Result<String> {
    serde_json::to_string_pretty(summary)
        .map(|s| s + "\n")
        .map_err(|e| Error::Format(format!("summary: {e}")))
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Summary> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Per-seed artefacts of one run, as consumed by [`write_run`].
pub struct SeedArtifacts<'a> {
    pub seed: u64,
    pub accuracy: &'a AccuracyMatrix,
    pub confusions: &'a [RetrievalConfusion],
}

/// Writes every per-seed CSV plus `summary.json` into `dir`.
pub fn write_run(dir: &Path, seeds: &[SeedArtifacts<'_>], summary: &Summary) -> Result<()> {
    for s in seeds {
        write_text(
            &dir.join(format!("accuracy_seed{}.csv", s.seed)),
            &accuracy_csv(s.accuracy),
        )?;
        write_text(
            &dir.join(format!("retrieval_seed{}.csv", s.seed)),
            &retrieval_csv(s.confusions),
        )?;
    }
    write_text(&dir.join("summary.json"), &summary_json(summary)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_csv_round_trips() {
        let a =
            AccuracyMatrix::from_rows(vec![vec![0.875], vec![0.5, 1.0], vec![0.25, 0.125, 0.0625]])
                .unwrap();
        let text = accuracy_csv(&a);
        assert_eq!(
            text,
            "after_task,task_0,task_1,task_2\n0,0.875000,,\n1,0.500000,1.000000,\n2,0.250000,0.125000,0.062500\n"
        );
        assert_eq!(parse_accuracy_csv(&text).unwrap(), a);
    }

    #[test]
    fn csv_values_are_rounded_to_six_decimals() {
        let a = AccuracyMatrix::from_rows(vec![vec![1.0 / 3.0]]).unwrap();
        let back = parse_accuracy_csv(&accuracy_csv(&a)).unwrap();
        assert_eq!(back.get(0, 0), Some(0.333333));
    }

    #[test]
    fn retrieval_rows_are_long_format() {
        let c = vec![
            RetrievalConfusion {
                after_task: 0,
                matrix: vec![vec![1.0]],
            },
            RetrievalConfusion {
                after_task: 1,
                matrix: vec![vec![0.75, 0.25], vec![0.0, 1.0]],
            },
        ];
        assert_eq!(
            retrieval_csv(&c),
            "after_task,query_task,key_task_0,key_task_1\n0,0,1.000000,\n1,0,0.750000,0.250000\n1,1,0.000000,1.000000\n"
        );
    }

    #[test]
    fn summary_has_mean_and_std_and_round_trips() {
        let s = Summary {
            variant: "full".into(),
            scenario: "separable".into(),
            tasks: 2,
            seeds: vec![SeedSummary {
                seed: 1993,
                class_order: vec![1, 0],
                faa: 0.5,
                final_forgetting: Some(0.1),
                task1_retrieval_precision: vec![1.0, 0.9],
                final_retrieval_min_diagonal: 0.9,
            }],
            faa: Aggregate {
                mean: 0.5,
                std: 0.0,
            },
            final_forgetting: None,
        };
        let text = summary_json(&s).unwrap();
        assert!(text.contains("\"mean\"") && text.contains("\"std\""));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/summary.json");
        write_text(&path, &text).unwrap();
        assert_eq!(read_summary(&path).unwrap(), s);
    }

    #[test]
    fn io_errors_carry_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = write_text(&blocker.join("sub/out.csv"), "a").unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
