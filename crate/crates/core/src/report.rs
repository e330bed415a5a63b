//! Accuracy aggregation across evaluation tasks.
//!
//! `avg` is the plain mean of per-task accuracies; `wt_avg` is total correct
//! answers over total questions, so large tasks count for more.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub accuracy: f64,
    pub questions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub tasks: Vec<TaskResult>,
    pub avg: f64,
    pub wt_avg: f64,
}

pub fn aggregate_accuracy(tasks: &[TaskResult]) -> Result<EvalSummary> {
    if tasks.is_empty() {
        return Err(Error::validation("no tasks to aggregate"));
    }
    for t in tasks {
        if !(0.0..=1.0).contains(&t.accuracy) {
            return Err(Error::validation(format!(
                "task `{}` accuracy {} outside [0, 1]",
                t.task, t.accuracy
            )));
        }
        if t.questions == 0 {
            return Err(Error::validation(format!("task `{}` has no questions", t.task)));
        }
    }
    let avg = tasks.iter().map(|t| t.accuracy).sum::<f64>() / tasks.len() as f64;
    let correct: f64 = tasks.iter().map(|t| t.accuracy * t.questions as f64).sum();
    let total: f64 = tasks.iter().map(|t| t.questions as f64).sum();
    Ok(EvalSummary {
        tasks: tasks.to_vec(),
        avg,
        wt_avg: correct / total,
    })
}

/// Reads `task,accuracy,questions` rows.
pub fn read_tasks_csv(path: &Path) -> Result<Vec<TaskResult>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    rdr.deserialize()
        .map(|r| {
            r.map_err(|source| Error::Csv {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}
