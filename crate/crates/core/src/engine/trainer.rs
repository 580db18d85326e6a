use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::batching::BatchStream;
use super::record::{checkpoint_id, BestCheckpoint, EvalPoint, RunRecord, StepLoss, TaskRecord};
use super::{Mode, TrainPlan};
use crate::analysis::{
    at_cadence, gradient_similarity_matrix, probe_contributions, representation_generalization,
    snapshot_task_gradient, task_mean_representations, upper_layers, GenCurve, SimilarityMatrix,
};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::MtlModel;
use crate::optim::{adamw_step, OptimizerState};
use crate::parallel::par_map;
use crate::tasks::{make_batch, task_loss, task_metric, Predictions, TaskData, TaskExample, TaskSpec};
use crate::tensor::Tensor;

/// Examples per forward pass during evaluation. Only affects speed.
const EVAL_CHUNK: usize = 64;

/// One optimizer step on a batch of `spec`'s task: the weighted task loss is
/// backpropagated and only the shared trunk and that task's head move.
/// Returns the weighted loss.
pub fn train_step(
    model: &mut MtlModel,
    spec: &TaskSpec,
    examples: &[&TaskExample],
    optimizer: &mut OptimizerState,
) -> Result<f64> {
    let ids = model.step_params(&spec.id)?;
    let (batch, labels) = make_batch(examples, &spec.kind, model.config.backbone.max_seq_len)?;
    let mut tape = Tape::new();
    let (_, preds) = model.forward_task(&mut tape, &spec.id, &batch)?;
    let loss = task_loss(&mut tape, &spec.kind, preds, &labels)?;
    let loss = tape.scale(loss, spec.weight);
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Data(format!("non-finite loss on task `{}`", spec.id)));
    }
    let grads = tape.backward(loss)?;
    model.store.apply_grads(&grads);
    adamw_step(&mut model.store, &ids, optimizer)?;
    if !model.backbone_frozen() {
        model.backbone_pristine = false;
    }
    Ok(value)
}

/// The task's metric over `examples`.
pub fn evaluate(model: &MtlModel, spec: &TaskSpec, examples: &[TaskExample]) -> Result<f64> {
    let mut preds = Predictions::empty(&spec.kind);
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&TaskExample> = chunk.iter().collect();
        let (batch, _) = make_batch(&refs, &spec.kind, model.config.backbone.max_seq_len)?;
        let mut tape = Tape::new();
        let (_, out) = model.forward_task(&mut tape, &spec.id, &batch)?;
        preds.extend_from(tape.value(out), &batch)?;
    }
    let gold: Vec<_> = examples.iter().map(|e| e.label.clone()).collect();
    task_metric(spec, &preds, &gold)
}

/// Digest of the plan, model layout, tasks and split sizes, ignoring seeds.
pub fn plan_fingerprint(plan: &TrainPlan, model: &MtlModel, tasks: &[(TaskSpec, TaskData)]) -> String {
    let mut plan = plan.clone();
    plan.seed = 0;
    let mut cfg = model.config.clone();
    cfg.backbone_seed = 0;
    cfg.spal_seed = 0;
    cfg.head_seed = 0;
    let tasks: Vec<_> = tasks
        .iter()
        .map(|(s, d)| (s, [d.train.len(), d.dev.len(), d.test.len()]))
        .collect();
    let json = serde_json::to_vec(&(plan, cfg, tasks)).expect("plain data serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSimilarity {
    pub step: u64,
    pub matrix: SimilarityMatrix,
}

/// Diagnostics gathered while training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub rep_gen: Vec<GenCurve>,
    pub grad_sims: Vec<GradSimilarity>,
    /// Backbone-branch weight per layer after training, when probing.
    pub probe: Option<Vec<f64>>,
}

/// Everything besides the model and optimizer needed to resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub record: RunRecord,
    pub artifacts: RunArtifacts,
}

fn values_of(model: &MtlModel) -> Vec<Tensor> {
    model.store.iter().map(|(_, p)| p.value.clone()).collect()
}

/// A training run in progress.
pub struct Trainer<'a> {
    plan: TrainPlan,
    tasks: &'a [(TaskSpec, TaskData)],
    model: MtlModel,
    optimizer: OptimizerState,
    stream: BatchStream,
    rep_layers: Vec<usize>,
    step: u64,
    total_steps: u64,
    record: RunRecord,
    artifacts: RunArtifacts,
    best: Vec<Option<Vec<Tensor>>>,
}

impl<'a> Trainer<'a> {
    pub fn new(plan: TrainPlan, mut model: MtlModel, tasks: &'a [(TaskSpec, TaskData)]) -> Result<Self> {
        plan.validate()?;
        if tasks.is_empty() {
            return Err(Error::config("tasks", "the task list is empty"));
        }
        if plan.mode == Mode::Stl && tasks.len() != 1 {
            return Err(Error::config("mode", format!("single-task mode with {} tasks", tasks.len())));
        }
        for (i, (spec, data)) in tasks.iter().enumerate() {
            spec.validate()?;
            if tasks[..i].iter().any(|(s, _)| s.id == spec.id) {
                return Err(Error::config("tasks", format!("duplicate task `{}`", spec.id)));
            }
            let head = model
                .head(&spec.id)
                .ok_or_else(|| Error::Contract(format!("task `{}` has no head", spec.id)))?;
            if head.kind != spec.kind {
                return Err(Error::Contract(format!("head of `{}` was built for another task kind", spec.id)));
            }
            if data.dev.is_empty() {
                return Err(Error::config("tasks", format!("task `{}` has an empty dev split", spec.id)));
            }
        }
        let num_layers = model.config.backbone.num_layers;
        let rep_layers = plan.analysis.rep_layers.clone().unwrap_or_else(|| upper_layers(num_layers));
        if plan.analysis.rep_gen {
            if tasks.len() < 2 {
                return Err(Error::config("analysis.rep_gen", "needs at least 2 tasks"));
            }
            if let Some(&bad) = rep_layers.iter().find(|&&l| l >= num_layers) {
                return Err(Error::config("analysis.rep_layers", format!("layer {bad} out of range")));
            }
        }
        model.set_backbone_trainable(!plan.freeze_backbone);
        let stream = BatchStream::new(
            tasks.iter().map(|(_, d)| d.train.len()).collect(),
            tasks.iter().map(|(s, _)| s.batch_size).collect(),
            plan.seed,
            plan.temperature,
        )?;
        let mut total_steps = plan.epochs * stream.epoch_len() as u64;
        if let Some(cap) = plan.max_steps {
            total_steps = total_steps.min(cap);
        }
        let record = RunRecord {
            seed: plan.seed,
            plan_fingerprint: plan_fingerprint(&plan, &model, tasks),
            mode: plan.mode,
            total_steps,
            tasks: tasks
                .iter()
                .map(|(s, _)| TaskRecord {
                    task: s.id.clone(),
                    metric: s.metric,
                    losses: Vec::new(),
                    evals: Vec::new(),
                    best: None,
                })
                .collect(),
        };
        let artifacts = RunArtifacts {
            rep_gen: if plan.analysis.rep_gen {
                rep_layers
                    .iter()
                    .map(|&layer| GenCurve {
                        layer,
                        points: Vec::new(),
                    })
                    .collect()
            } else {
                Vec::new()
            },
            ..RunArtifacts::default()
        };
        Ok(Self {
            optimizer: OptimizerState::new(plan.optimizer, total_steps),
            plan,
            tasks,
            model,
            stream,
            rep_layers,
            step: 0,
            total_steps,
            record,
            artifacts,
            best: vec![None; tasks.len()],
        })
    }

    /// Continues a run saved at `state.step`. Best-checkpoint weights from
    /// before the save are not carried over.
    pub fn resume(
        plan: TrainPlan,
        model: MtlModel,
        optimizer: OptimizerState,
        tasks: &'a [(TaskSpec, TaskData)],
        state: TrainerState,
    ) -> Result<Self> {
        let mut t = Self::new(plan, model, tasks)?;
        if state.record.plan_fingerprint != t.record.plan_fingerprint || state.record.seed != t.record.seed {
            return Err(Error::Contract("saved state belongs to a different plan".into()));
        }
        if state.step > t.total_steps || optimizer.step != state.step || optimizer.total_steps != t.total_steps {
            return Err(Error::Contract(format!(
                "saved state at step {} does not match the optimizer (step {}, total {})",
                state.step, optimizer.step, optimizer.total_steps
            )));
        }
        t.optimizer = optimizer;
        t.step = state.step;
        t.record = state.record;
        t.artifacts = state.artifacts;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn model(&self) -> &MtlModel {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            record: self.record.clone(),
            artifacts: self.artifacts.clone(),
        }
    }

    /// One optimizer step, followed by any evaluation or snapshot due.
    pub fn advance(&mut self) -> Result<f64> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let b = self.stream.get(self.step)?;
        let (spec, data) = &self.tasks[b.task];
        let examples: Vec<&TaskExample> = b.indices.iter().map(|&i| &data.train[i]).collect();
        let loss = train_step(&mut self.model, spec, &examples, &mut self.optimizer)?;
        self.step += 1;
        self.record.tasks[b.task].losses.push(StepLoss { step: self.step, loss });
        if self.step % self.plan.eval_interval == 0 {
            self.eval_point()?;
        }
        if self.plan.analysis.grad_snapshots && at_cadence(self.step, self.plan.analysis.snapshot_interval) {
            self.gradient_snapshots()?;
        }
        Ok(loss)
    }

    /// Advances until `step` or the end of training, whichever comes first.
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        while self.step < step.min(self.total_steps) {
            self.advance()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<TrainOutcome> {
        self.run_until(self.total_steps)?;
        if self.model.probe.is_some() {
            self.artifacts.probe = Some(probe_contributions(&self.model)?);
        }
        Ok(TrainOutcome {
            record: self.record,
            artifacts: self.artifacts,
            model: self.model,
            best: self.best,
        })
    }

    fn eval_point(&mut self) -> Result<()> {
        let model = &self.model;
        let scores = par_map(self.tasks, |(spec, data)| evaluate(model, spec, &data.dev))
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
        for (t, score) in scores.into_iter().enumerate() {
            let rec = &mut self.record.tasks[t];
            rec.evals.push(EvalPoint { step: self.step, score });
            if rec.best.as_ref().map_or(true, |b| rec.metric.better(score, b.score)) {
                rec.best = Some(BestCheckpoint {
                    id: checkpoint_id(&rec.task, self.step),
                    step: self.step,
                    eval_index: rec.evals.len() - 1,
                    score,
                });
                self.best[t] = Some(values_of(&self.model));
            }
        }
        if self.plan.analysis.rep_gen && self.step % self.plan.rep_gen_interval() == 0 {
            let layers = &self.rep_layers;
            let summaries = par_map(self.tasks, |(spec, data)| {
                task_mean_representations(model, &spec.id, &data.dev, layers)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            for (i, curve) in self.artifacts.rep_gen.iter_mut().enumerate() {
                let at_layer: Vec<_> = summaries.iter().map(|s| s[i].clone()).collect();
                curve.points.push((self.step, representation_generalization(&at_layer)?));
            }
        }
        Ok(())
    }

    fn gradient_snapshots(&mut self) -> Result<()> {
        let model = &self.model;
        let step = self.step;
        let snaps = par_map(self.tasks, |(spec, data)| snapshot_task_gradient(model, spec, &data.train, step))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        self.artifacts.grad_sims.push(GradSimilarity {
            step,
            matrix: gradient_similarity_matrix(&snaps)?,
        });
        Ok(())
    }
}

/// A finished run: its record, diagnostics, final model, and the weights at
/// each task's best evaluation.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub artifacts: RunArtifacts,
    pub model: MtlModel,
    best: Vec<Option<Vec<Tensor>>>,
}

impl TrainOutcome {
    /// The model as it was at `task`'s best evaluation.
    pub fn best_model(&self, task: &str) -> Result<MtlModel> {
        let t = self
            .record
            .tasks
            .iter()
            .position(|r| r.task == task)
            .ok_or_else(|| Error::Contract(format!("task `{task}` is not in the run")))?;
        let values = self.best[t]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("no best weights held for task `{task}`")))?;
        let mut m = self.model.clone();
        for ((id, _), v) in self.model.store.iter().zip(values) {
            m.store.get_mut(id).value = v.clone();
        }
        Ok(m)
    }
}

/// Trains `model` on `tasks` under `plan` from scratch.
pub fn run_training(plan: TrainPlan, model: MtlModel, tasks: &[(TaskSpec, TaskData)]) -> Result<TrainOutcome> {
    Trainer::new(plan, model, tasks)?.finish()
}
