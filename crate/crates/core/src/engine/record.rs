use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};
use crate::tasks::Metric;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub id: String,
    pub step: u64,
    pub eval_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: String,
    pub metric: Metric,
    pub losses: Vec<StepLoss>,
    pub evals: Vec<EvalPoint>,
    pub best: Option<BestCheckpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// Digest of everything that defines the run except its seed.
    pub plan_fingerprint: String,
    pub mode: Mode,
    pub total_steps: u64,
    pub tasks: Vec<TaskRecord>,
}

impl RunRecord {
    pub fn task(&self, id: &str) -> Option<&TaskRecord> {
        self.tasks.iter().find(|t| t.task == id)
    }

    /// Every recorded loss in step order, regardless of task.
    pub fn loss_trajectory(&self) -> Vec<StepLoss> {
        let mut all: Vec<StepLoss> = self.tasks.iter().flat_map(|t| t.losses.iter().copied()).collect();
        all.sort_by_key(|l| l.step);
        all
    }
}

pub(crate) fn checkpoint_id(task: &str, step: u64) -> String {
    format!("{task}@{step}")
}

/// Best eval of `task`: the maximum, or the minimum for lower-is-better
/// metrics, with ties going to the earliest eval.
pub fn select_best(record: &RunRecord, task: &str) -> Result<BestCheckpoint> {
    let t = record
        .task(task)
        .ok_or_else(|| Error::Contract(format!("task `{task}` is not in the run record")))?;
    let mut best: Option<(usize, EvalPoint)> = None;
    for (i, e) in t.evals.iter().enumerate() {
        if best.map_or(true, |(_, b)| t.metric.better(e.score, b.score)) {
            best = Some((i, *e));
        }
    }
    let (eval_index, e) = best.ok_or_else(|| Error::Contract(format!("task `{task}` has no evaluations")))?;
    Ok(BestCheckpoint {
        id: checkpoint_id(task, e.step),
        step: e.step,
        eval_index,
        score: e.score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAggregate {
    pub task: String,
    pub metric: Metric,
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub plan_fingerprint: String,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskAggregate>,
}

/// Mean and population standard deviation of each task's best score.
pub fn aggregate_seeds(records: &[RunRecord]) -> Result<SeedAggregate> {
    if records.len() < 2 {
        return Err(Error::Contract(format!("need at least 2 runs to aggregate, got {}", records.len())));
    }
    let first = &records[0];
    for r in records {
        if r.plan_fingerprint != first.plan_fingerprint {
            return Err(Error::Contract(format!(
                "runs with seeds {} and {} used different plans",
                first.seed, r.seed
            )));
        }
    }
    let tasks = first
        .tasks
        .iter()
        .map(|t| {
            let scores: Vec<f64> = records
                .iter()
                .map(|r| {
                    r.task(&t.task)
                        .and_then(|x| x.best.as_ref())
                        .map(|b| b.score)
                        .ok_or_else(|| Error::Contract(format!("run {} has no best score for `{}`", r.seed, t.task)))
                })
                .collect::<Result<_>>()?;
            let n = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
            Ok(TaskAggregate {
                task: t.task.clone(),
                metric: t.metric,
                scores,
                mean,
                std: var.sqrt(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SeedAggregate {
        plan_fingerprint: first.plan_fingerprint.clone(),
        seeds: records.iter().map(|r| r.seed).collect(),
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: u64, metric: Metric, scores: &[f64]) -> RunRecord {
        let evals: Vec<EvalPoint> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| EvalPoint {
                step: 200 * (i as u64 + 1),
                score: s,
            })
            .collect();
        let mut r = RunRecord {
            seed,
            plan_fingerprint: "p".into(),
            mode: Mode::Mtl,
            total_steps: 1000,
            tasks: vec![TaskRecord {
                task: "A".into(),
                metric,
                losses: Vec::new(),
                evals,
                best: None,
            }],
        };
        r.tasks[0].best = select_best(&r, "A").ok();
        r
    }

    #[test]
    fn best_examples() {
        assert_eq!(select_best(&record(1, Metric::Accuracy, &[80.0, 85.0, 83.0]), "A").unwrap().eval_index, 1);
        assert_eq!(select_best(&record(1, Metric::Rmse, &[0.3, 0.21, 0.25]), "A").unwrap().eval_index, 1);
        let tie = select_best(&record(1, Metric::Accuracy, &[85.0, 85.0]), "A").unwrap();
        assert_eq!((tie.eval_index, tie.step, tie.id.as_str()), (0, 200, "A@200"));
        assert!(matches!(select_best(&record(1, Metric::Accuracy, &[]), "A"), Err(Error::Contract(_))));
        assert!(select_best(&record(1, Metric::Accuracy, &[1.0]), "B").is_err());
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate_seeds(&[record(1, Metric::Accuracy, &[86.0]), record(2, Metric::Accuracy, &[88.0])]).unwrap();
        assert_eq!((a.tasks[0].mean, a.tasks[0].std), (87.0, 1.0));
        let same = aggregate_seeds(&[record(1, Metric::Accuracy, &[70.0]), record(2, Metric::Accuracy, &[70.0])]).unwrap();
        assert_eq!(same.tasks[0].std, 0.0);
        assert!(aggregate_seeds(&[record(1, Metric::Accuracy, &[70.0])]).is_err());
        let mut other = record(2, Metric::Accuracy, &[70.0]);
        other.plan_fingerprint = "q".into();
        assert!(matches!(
            aggregate_seeds(&[record(1, Metric::Accuracy, &[70.0]), other]),
            Err(Error::Contract(_))
        ));
    }
}
