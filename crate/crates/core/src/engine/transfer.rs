use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::record::RunRecord;
use super::trainer::run_training;
use super::TrainPlan;
use crate::error::{Error, Result};
use crate::model::MtlModel;
use crate::seeding::{fnv1a, rng};
use crate::tasks::{TaskData, TaskExample, TaskSpec};

/// Few-shot split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shots {
    pub train: usize,
    pub dev: usize,
}

impl Default for Shots {
    fn default() -> Self {
        Self { train: 400, dev: 400 }
    }
}

/// Seeded subsample of the train and dev splits; the test split is kept whole.
pub fn sample_shots(data: &TaskData, shots: Shots, seed: u64) -> Result<TaskData> {
    if shots.train == 0 || shots.dev == 0 {
        return Err(Error::config("shots", "few-shot sizes must be positive"));
    }
    if shots.train > data.train.len() || shots.dev > data.dev.len() {
        return Err(Error::config(
            "shots",
            format!(
                "asked for {}/{} examples but the task has {}/{}",
                shots.train,
                shots.dev,
                data.train.len(),
                data.dev.len()
            ),
        ));
    }
    let pick = |split: &[TaskExample], n: usize, label: &str| -> Vec<TaskExample> {
        let mut idx: Vec<usize> = (0..split.len()).collect();
        idx.shuffle(&mut rng(seed, fnv1a(label.as_bytes())));
        let mut keep = idx[..n].to_vec();
        keep.sort_unstable();
        keep.into_iter().map(|i| split[i].clone()).collect()
    };
    Ok(TaskData {
        train: pick(&data.train, shots.train, "shots/train"),
        dev: pick(&data.dev, shots.dev, "shots/dev"),
        test: data.test.clone(),
    })
}

/// The pretrained shared trunk with a freshly initialized head for `task`.
pub fn transfer_model(pretrained: &MtlModel, task: &TaskSpec) -> Result<MtlModel> {
    let mut m = pretrained.trunk()?;
    m.add_head(&task.id, &task.kind)?;
    Ok(m)
}

pub struct TransferOutcome {
    pub record: RunRecord,
    pub model: MtlModel,
}

/// Fine-tunes the pretrained trunk plus a new head on a few-shot sample of
/// an unseen task.
pub fn transfer_finetune(
    pretrained: &MtlModel,
    task: &TaskSpec,
    data: &TaskData,
    shots: Shots,
    plan: TrainPlan,
) -> Result<TransferOutcome> {
    let few = sample_shots(data, shots, plan.seed)?;
    let model = transfer_model(pretrained, task)?;
    let tasks = [(task.clone(), few)];
    let out = run_training(plan, model, &tasks)?;
    Ok(TransferOutcome {
        record: out.record,
        model: out.model,
    })
}
