//! Inference with prototype-based task identification, the stage × task
//! accuracy matrix and its Transfer / Avg / Last summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Method, ModelState};
use crate::pges::{identify_task, TaskDecision};
use crate::taskgen::{TaskData, TaskStream};

/// How the task whose adapters classify a sample is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Prototype scores pick the task, or the frozen encoder below threshold.
    WithPges,
    /// The evaluation task's own adapters when trained, else the frozen
    /// encoder.
    OracleTaskId,
    /// Always the frozen encoder.
    FrozenZeroShot,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::WithPges => "with_pges",
            Protocol::OracleTaskId => "oracle_task_id",
            Protocol::FrozenZeroShot => "frozen_zero_shot",
        }
    }
}

/// Where a sample was sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    Task(usize),
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub label: usize,
    pub route: Route,
    pub decision: Option<TaskDecision>,
}

/// Classifies one sample of task `eval_task`. A sample routed to another
/// task is classified among that task's classes.
pub fn infer(
    state: &ModelState,
    x: &[f64],
    eval_task: usize,
    protocol: Protocol,
) -> Result<Inference> {
    match protocol {
        Protocol::FrozenZeroShot => Ok(Inference {
            label: state.zero_shot(x, eval_task)?,
            route: Route::Fallback,
            decision: None,
        }),
        Protocol::OracleTaskId => {
            if state.is_trained(eval_task) {
                Ok(Inference {
                    label: state.classify(x, eval_task)?,
                    route: Route::Task(eval_task),
                    decision: None,
                })
            } else {
                Ok(Inference {
                    label: state.zero_shot(x, eval_task)?,
                    route: Route::Fallback,
                    decision: None,
                })
            }
        }
        Protocol::WithPges if state.method == Method::SharedAdapter => {
            // one adapter for everything; nothing to identify
            if state.completed.is_empty() {
                return infer(state, x, eval_task, Protocol::FrozenZeroShot);
            }
            Ok(Inference {
                label: state.classify(x, eval_task)?,
                route: Route::Task(eval_task),
                decision: None,
            })
        }
        Protocol::WithPges => {
            if state.prototypes.is_empty() {
                return Ok(Inference {
                    label: state.zero_shot(x, eval_task)?,
                    route: Route::Fallback,
                    decision: None,
                });
            }
            let z = state.encoder.encode(x)?.feature;
            let decision = identify_task(&z, &state.prototypes, state.threshold)?;
            match decision.task {
                Some(t) => Ok(Inference {
                    label: state.classify(x, t)?,
                    route: Route::Task(t),
                    decision: Some(decision),
                }),
                None => Ok(Inference {
                    label: state.predict_label(&z, eval_task)?,
                    route: Route::Fallback,
                    decision: Some(decision),
                }),
            }
        }
    }
}

/// Accuracy and route distribution of one task's test split at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: usize,
    pub accuracy: f64,
    /// Fraction routed to each task, indexed by task.
    pub routed_to: Vec<f64>,
    pub fallback: f64,
}

pub fn evaluate_task(
    state: &ModelState,
    data: &TaskData,
    protocol: Protocol,
    num_tasks: usize,
    batch_size: usize,
) -> Result<TaskEval> {
    let task = data.spec.task;
    if data.test.is_empty() {
        return Err(Error::Shape(format!("task {task} has no test data")));
    }
    let mut correct = 0usize;
    let mut routed = vec![0usize; num_tasks];
    let mut fallback = 0usize;
    for chunk in data.test.chunks(batch_size.max(1)) {
        for s in chunk {
            let inf = infer(state, &s.x, task, protocol)?;
            if inf.label == s.label {
                correct += 1;
            }
            match inf.route {
                Route::Task(t) => {
                    *routed.get_mut(t).ok_or(Error::Index {
                        index: t,
                        len: num_tasks,
                    })? += 1
                }
                Route::Fallback => fallback += 1,
            }
        }
    }
    let n = data.test.len() as f64;
    Ok(TaskEval {
        task,
        accuracy: correct as f64 / n,
        routed_to: routed.iter().map(|&c| c as f64 / n).collect(),
        fallback: fallback as f64 / n,
    })
}

/// `a[stage][task]`: accuracy on `task` after training stage `stage`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub protocol: Protocol,
    pub entries: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(protocol: Protocol, entries: Vec<Vec<f64>>) -> Result<Self> {
        let k = entries.len();
        if entries.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("accuracy matrix must be square".into()));
        }
        if entries.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numerical("accuracy outside [0, 1]".into()));
        }
        Ok(Self { protocol, entries })
    }

    pub fn tasks(&self) -> usize {
        self.entries.len()
    }

    /// Accuracy on task `k` after stage `j` (both 0-based).
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.entries[j][k]
    }
}

/// Per-task values and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// `(task, value)`
    pub per_task: Vec<(usize, f64)>,
    pub overall: Option<f64>,
}

impl MetricSummary {
    fn from_values(per_task: Vec<(usize, f64)>) -> Self {
        let overall = (!per_task.is_empty())
            .then(|| per_task.iter().map(|(_, v)| v).sum::<f64>() / per_task.len() as f64);
        Self { per_task, overall }
    }
}

/// Mean accuracy of each task over the stages before it was trained; the
/// first task has none and is omitted.
pub fn transfer_metric(a: &AccuracyMatrix) -> MetricSummary {
    let per_task = (1..a.tasks())
        .map(|k| (k, (0..k).map(|j| a.get(k, j)).sum::<f64>() / k as f64))
        .collect();
    MetricSummary::from_values(per_task)
}

/// Mean accuracy of each task over all stages.
pub fn avg_metric(a: &AccuracyMatrix) -> MetricSummary {
    let n = a.tasks();
    let per_task = (0..n)
        .map(|k| (k, (0..n).map(|j| a.get(k, j)).sum::<f64>() / n as f64))
        .collect();
    MetricSummary::from_values(per_task)
}

/// Accuracy of each task after the final stage.
pub fn last_metric(a: &AccuracyMatrix) -> MetricSummary {
    let n = a.tasks();
    let per_task = (0..n).map(|k| (k, a.get(k, n - 1))).collect();
    MetricSummary::from_values(per_task)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub transfer: MetricSummary,
    pub avg: MetricSummary,
    pub last: MetricSummary,
}

pub fn metrics(a: &AccuracyMatrix) -> Metrics {
    Metrics {
        transfer: transfer_metric(a),
        avg: avg_metric(a),
        last: last_metric(a),
    }
}

/// Route distribution of every task's test split after every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingMatrix {
    /// `cells[stage][task]`
    pub cells: Vec<Vec<TaskEval>>,
}

impl RoutingMatrix {
    /// Seen tasks: fraction routed to themselves. Unseen tasks: fraction
    /// sent to the frozen encoder.
    pub fn routing_accuracy(&self, stage: usize, task: usize) -> f64 {
        let c = &self.cells[stage][task];
        if task <= stage {
            c.routed_to[task]
        } else {
            c.fallback
        }
    }

    /// Fraction of an unseen task's samples routed to any learned task.
    pub fn leakage(&self, stage: usize, task: usize) -> f64 {
        self.cells[stage][task].routed_to.iter().sum()
    }
}

/// Evaluates one stage's model on every task.
pub fn evaluate_stage(
    state: &ModelState,
    stream: &TaskStream,
    protocol: Protocol,
    batch_size: usize,
) -> Result<Vec<TaskEval>> {
    stream
        .tasks
        .iter()
        .map(|t| evaluate_task(state, t, protocol, stream.len(), batch_size))
        .collect()
}

/// Accuracy and routing matrices from one model snapshot per stage.
pub fn evaluate_stream(
    stages: &[ModelState],
    stream: &TaskStream,
    protocol: Protocol,
    batch_size: usize,
) -> Result<(AccuracyMatrix, RoutingMatrix)> {
    if stages.len() != stream.len() {
        return Err(Error::Lookup(format!(
            "{} stage snapshots for a {}-task stream",
            stages.len(),
            stream.len()
        )));
    }
    let cells = stages
        .iter()
        .map(|s| evaluate_stage(s, stream, protocol, batch_size))
        .collect::<Result<Vec<_>>>()?;
    matrices_from_cells(protocol, cells)
}

pub fn matrices_from_cells(
    protocol: Protocol,
    cells: Vec<Vec<TaskEval>>,
) -> Result<(AccuracyMatrix, RoutingMatrix)> {
    let acc = cells
        .iter()
        .map(|row| row.iter().map(|c| c.accuracy).collect())
        .collect();
    Ok((AccuracyMatrix::new(protocol, acc)?, RoutingMatrix { cells }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(entries: Vec<Vec<f64>>) -> AccuracyMatrix {
        AccuracyMatrix::new(Protocol::WithPges, entries).unwrap()
    }

    #[test]
    fn two_task_worked_example() {
        // a_1 = (0.9, 0.8), a_2 = (0.6, 0.95); rows are stages
        let a = m(vec![vec![0.9, 0.6], vec![0.8, 0.95]]);
        let t = transfer_metric(&a);
        assert_eq!(t.per_task, vec![(1, 0.6)]);
        assert_eq!(t.overall, Some(0.6));
        let avg = avg_metric(&a);
        assert!((avg.per_task[0].1 - 0.85).abs() < 1e-15);
        assert!((avg.per_task[1].1 - 0.775).abs() < 1e-15);
        assert!((avg.overall.unwrap() - 0.8125).abs() < 1e-15);
        let last = last_metric(&a);
        assert_eq!(last.per_task, vec![(0, 0.8), (1, 0.95)]);
        assert!((last.overall.unwrap() - 0.875).abs() < 1e-15);
    }

    #[test]
    fn single_task_cases() {
        let a = m(vec![vec![0.7]]);
        let t = transfer_metric(&a);
        assert!(t.per_task.is_empty());
        assert_eq!(t.overall, None);
        assert_eq!(last_metric(&a).overall, Some(0.7));
        assert_eq!(avg_metric(&a).overall, last_metric(&a).overall);
    }

    #[test]
    fn constant_matrix() {
        let a = m(vec![vec![0.4; 3]; 3]);
        for s in [transfer_metric(&a), avg_metric(&a), last_metric(&a)] {
            assert!((s.overall.unwrap() - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_matrices_are_rejected() {
        assert!(AccuracyMatrix::new(Protocol::WithPges, vec![vec![0.5, 0.5]]).is_err());
        assert!(AccuracyMatrix::new(Protocol::WithPges, vec![vec![1.5]]).is_err());
    }
}
