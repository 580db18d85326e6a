//! End-to-end experiment procedures behind the command-line tool.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    gradient_similarity_matrix, probe_contributions, representation_generalization, similarity_matrix,
    skill_similarity, snapshot_task_gradient, task_embedding, task_mean_representations, text_embedding,
    upper_layers, GenCurve, SimilarityMatrix, SkillSimilarity,
};
use crate::config::RunConfig;
use crate::engine::{
    aggregate_seeds, evaluate, transfer_finetune, Mode, RunArtifacts, RunRecord, SeedAggregate, Shots, TrainPlan,
    Trainer, TrainerState,
};
use crate::error::{Error, Result};
use crate::io::metrics::{matrix_csv, probe_csv, repgen_csv, write_json};
use crate::io::{emit_aggregate, emit_embeddings, emit_metrics, load_checkpoint, save_checkpoint, write_jsonl_dataset};
use crate::model::MtlModel;
use crate::parallel::par_map;
use crate::spal::{capacity_fraction, count_spal_params, SpalConfig};
use crate::synth::gen_synthetic_suite;
use crate::tasks::{TaskData, TaskSpec};

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Options for a single training run.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out: Option<PathBuf>,
    /// Write `final.ckpt` and one `best_<task>.ckpt` per task.
    pub save_checkpoints: bool,
    /// Also write a resumable `resume.ckpt` every this many steps.
    pub checkpoint_every: Option<u64>,
    /// Continue from a resumable checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
}

pub struct RunOutput {
    pub record: RunRecord,
    pub artifacts: RunArtifacts,
    pub model: MtlModel,
    pub embeddings: Option<Embeddings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    pub task: SimilarityMatrix,
    pub text: SimilarityMatrix,
}

/// Task (diagonal Fisher) and text (mean representation) similarities over
/// each task's training split.
pub fn embedding_similarities(model: &MtlModel, tasks: &[(TaskSpec, TaskData)]) -> Result<Embeddings> {
    let labels: Vec<String> = tasks.iter().map(|(s, _)| s.id.clone()).collect();
    let task_vecs = par_map(tasks, |(s, d)| task_embedding(model, s, &d.train))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let text_vecs = par_map(tasks, |(_, d)| text_embedding(model, &d.train))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Embeddings {
        task: similarity_matrix(labels.clone(), &task_vecs)?,
        text: similarity_matrix(labels, &text_vecs)?,
    })
}

fn skill_report(cfg: &RunConfig, artifacts: &RunArtifacts) -> Result<Vec<(u64, SkillSimilarity)>> {
    if cfg.analysis.skills.is_empty() {
        return Ok(Vec::new());
    }
    let skills = cfg.skills();
    artifacts
        .grad_sims
        .iter()
        .map(|g| Ok((g.step, skill_similarity(&g.matrix, &skills)?)))
        .collect()
}

fn resume_state(path: &Path) -> Result<(MtlModel, crate::optim::OptimizerState, TrainerState)> {
    let ckpt = load_checkpoint(path)?;
    let optimizer = ckpt
        .optimizer
        .ok_or_else(|| Error::Contract(format!("{} holds no optimizer state", path.display())))?;
    let extra = ckpt
        .extra
        .ok_or_else(|| Error::Contract(format!("{} holds no trainer state", path.display())))?;
    let state: TrainerState = serde_json::from_str(&extra)?;
    Ok((ckpt.model, optimizer, state))
}

/// Trains one configuration with one seed and writes its outputs.
pub fn train_with_tasks(
    cfg: &RunConfig,
    tasks: &[(TaskSpec, TaskData)],
    seed: u64,
    opts: &TrainOptions,
) -> Result<RunOutput> {
    let started = Instant::now();
    let plan = cfg.train_plan(seed);
    let mut trainer = match &opts.resume {
        Some(path) => {
            let (model, optimizer, state) = resume_state(path)?;
            Trainer::resume(plan, model, optimizer, tasks, state)?
        }
        None => Trainer::new(plan, cfg.build_model(tasks, seed)?, tasks)?,
    };
    if let Some(every) = opts.checkpoint_every.filter(|&n| n > 0) {
        let out = opts
            .out
            .as_ref()
            .ok_or_else(|| Error::config("out", "periodic checkpoints need an output directory"))?;
        mkdir(out)?;
        while !trainer.is_done() {
            let next = (trainer.step() / every + 1) * every;
            trainer.run_until(next)?;
            let state = serde_json::to_string(&trainer.state())?;
            save_checkpoint(&out.join("resume.ckpt"), trainer.model(), Some(trainer.optimizer()), Some(&state))?;
        }
    } else {
        trainer.run_until(trainer.total_steps())?;
    }
    let final_state = serde_json::to_string(&trainer.state())?;
    let final_optimizer = trainer.optimizer().clone();
    let outcome = trainer.finish()?;
    let embeddings = if cfg.analysis.embeddings {
        Some(embedding_similarities(&outcome.model, tasks)?)
    } else {
        None
    };
    if let Some(out) = &opts.out {
        emit_metrics(out, &outcome.record, &outcome.artifacts)?;
        if let Some(e) = &embeddings {
            emit_embeddings(out, &e.task, &e.text)?;
        }
        let skills = skill_report(cfg, &outcome.artifacts)?;
        if !skills.is_empty() {
            write_json(&out.join("gradsim_skills.json"), &skills)?;
        }
        if opts.save_checkpoints {
            save_checkpoint(&out.join("final.ckpt"), &outcome.model, Some(&final_optimizer), Some(&final_state))?;
            for (spec, _) in tasks {
                if let Ok(m) = outcome.best_model(&spec.id) {
                    save_checkpoint(&out.join(format!("best_{}.ckpt", spec.id)), &m, None, None)?;
                }
            }
        }
        write_json(
            &out.join("timing.json"),
            &serde_json::json!({ "seconds": started.elapsed().as_secs_f64() }),
        )?;
    }
    Ok(RunOutput {
        record: outcome.record,
        artifacts: outcome.artifacts,
        model: outcome.model,
        embeddings,
    })
}

pub fn train(cfg: &RunConfig, seed: u64, opts: &TrainOptions) -> Result<RunOutput> {
    let tasks = cfg.load_tasks()?;
    train_with_tasks(cfg, &tasks, seed, opts)
}

fn require_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.len() < 2 {
        return Err(Error::config("seeds", "aggregation needs at least 2 seeds"));
    }
    let mut s = seeds.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != seeds.len() {
        return Err(Error::config("seeds", "seeds must be distinct"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub hidden: usize,
    pub spal_params: usize,
    pub capacity_fraction: f64,
    pub aggregate: SeedAggregate,
}

fn summary_rows(prefix: &str, aggregate: &SeedAggregate, out: &mut String) {
    for t in &aggregate.tasks {
        let metric = serde_json::to_value(t.metric).expect("enum serializes");
        out.push_str(&format!(
            "{prefix},{},{},{},{}\n",
            t.task,
            metric.as_str().unwrap_or_default(),
            t.mean,
            t.std
        ));
    }
}

/// Trains every SPAL width in `hidden` under every seed and aggregates
/// best dev scores per width.
pub fn sweep_capacity(cfg: &RunConfig, hidden: &[usize], seeds: &[u64], out: &Path) -> Result<Vec<SweepPoint>> {
    require_seeds(seeds)?;
    if hidden.is_empty() {
        return Err(Error::config("hidden", "no SPAL widths given"));
    }
    let tasks = cfg.load_tasks()?;
    let backbone = cfg.backbone.config();
    let mut points = Vec::new();
    let mut csv = String::from("hidden,spal_params,fraction,task,metric,mean,std\n");
    for &h in hidden {
        let mut c = cfg.clone();
        c.spal_hidden = Some(h);
        c.validate()?;
        let spal = SpalConfig {
            hidden_size: h,
            num_heads: backbone.num_heads,
        };
        let dir = out.join(format!("h{h}"));
        let mut records = Vec::new();
        for &seed in seeds {
            eprintln!("sweep: hidden {h}, seed {seed}");
            let opts = TrainOptions {
                out: Some(dir.join(format!("seed{seed}"))),
                ..TrainOptions::default()
            };
            records.push(train_with_tasks(&c, &tasks, seed, &opts)?.record);
        }
        let aggregate = aggregate_seeds(&records)?;
        emit_aggregate(&dir, &aggregate)?;
        let point = SweepPoint {
            hidden: h,
            spal_params: count_spal_params(&spal, &backbone),
            capacity_fraction: capacity_fraction(&spal, &backbone),
            aggregate,
        };
        summary_rows(
            &format!("{h},{},{}", point.spal_params, point.capacity_fraction),
            &point.aggregate,
            &mut csv,
        );
        points.push(point);
    }
    write_text(&out.join("capacity.csv"), &csv)?;
    write_json(&out.join("capacity.json"), &points)?;
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStage {
    pub dropped: Vec<String>,
    pub tasks: Vec<String>,
    pub aggregate: SeedAggregate,
}

/// Retrains with tasks removed cumulatively in `order`, starting from the
/// full set, until one task would be left without a predecessor stage.
pub fn ablate_tasks(cfg: &RunConfig, order: &[String], seeds: &[u64], out: &Path) -> Result<Vec<AblationStage>> {
    require_seeds(seeds)?;
    let all = cfg.load_tasks()?;
    if let Some(bad) = order.iter().find(|id| !all.iter().any(|(s, _)| &&s.id == id)) {
        return Err(Error::config("order", format!("unknown task `{bad}`")));
    }
    let mut stages = Vec::new();
    let mut csv = String::from("stage,dropped,task,metric,mean,std\n");
    for k in 0..=order.len() {
        let dropped = &order[..k];
        let tasks: Vec<(TaskSpec, TaskData)> = all.iter().filter(|(s, _)| !dropped.contains(&s.id)).cloned().collect();
        if tasks.is_empty() {
            break;
        }
        let mut c = cfg.clone();
        if tasks.len() < 2 {
            c.analysis.rep_gen = false;
        }
        let dir = out.join(format!("stage{k}"));
        let mut records = Vec::new();
        for &seed in seeds {
            eprintln!("ablate: stage {k} ({} tasks), seed {seed}", tasks.len());
            let opts = TrainOptions {
                out: Some(dir.join(format!("seed{seed}"))),
                ..TrainOptions::default()
            };
            records.push(train_with_tasks(&c, &tasks, seed, &opts)?.record);
        }
        let aggregate = aggregate_seeds(&records)?;
        emit_aggregate(&dir, &aggregate)?;
        summary_rows(&format!("{k},{}", dropped.join("+")), &aggregate, &mut csv);
        stages.push(AblationStage {
            dropped: dropped.to_vec(),
            tasks: tasks.iter().map(|(s, _)| s.id.clone()).collect(),
            aggregate,
        });
    }
    write_text(&out.join("ablation.csv"), &csv)?;
    write_json(&out.join("ablation.json"), &stages)?;
    Ok(stages)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub target: String,
    pub pretrain_steps: u64,
    pub shots: Shots,
    pub records: Vec<RunRecord>,
    pub aggregate: Option<SeedAggregate>,
}

/// Multi-task pretraining on every task except `target`, then few-shot
/// fine-tuning of the shared trunk on `target`.
pub fn transfer(
    cfg: &RunConfig,
    target: &str,
    pretrain_steps: u64,
    shots: Shots,
    seeds: &[u64],
    out: &Path,
) -> Result<TransferReport> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "no seeds given"));
    }
    let all = cfg.load_tasks()?;
    let (target_spec, target_data) = all
        .iter()
        .find(|(s, _)| s.id == target)
        .cloned()
        .ok_or_else(|| Error::config("target", format!("unknown task `{target}`")))?;
    let sources: Vec<(TaskSpec, TaskData)> = all.into_iter().filter(|(s, _)| s.id != target).collect();
    if sources.is_empty() {
        return Err(Error::config("target", "no source tasks left for pretraining"));
    }
    let mut pre = cfg.clone();
    pre.plan.mode = Some(Mode::Mtl);
    pre.plan.max_steps = Some(pretrain_steps);
    if sources.len() < 2 {
        pre.analysis.rep_gen = false;
    }
    let mut records = Vec::new();
    for &seed in seeds {
        eprintln!("transfer: pretraining seed {seed}");
        let dir = out.join(format!("seed{seed}"));
        let opts = TrainOptions {
            out: Some(dir.join("pretrain")),
            ..TrainOptions::default()
        };
        let trunk = train_with_tasks(&pre, &sources, seed, &opts)?.model.trunk()?;
        save_checkpoint(&dir.join("pretrained_trunk.ckpt"), &trunk, None, None)?;
        let mut plan = TrainPlan::transfer(seed);
        plan.optimizer = cfg.train_plan(seed).optimizer;
        plan.freeze_backbone = cfg.train_plan(seed).freeze_backbone;
        eprintln!("transfer: fine-tuning seed {seed} on {target}");
        let done = transfer_finetune(&trunk, &target_spec, &target_data, shots, plan)?;
        emit_metrics(&dir.join("finetune"), &done.record, &RunArtifacts::default())?;
        records.push(done.record);
    }
    let aggregate = if records.len() >= 2 { Some(aggregate_seeds(&records)?) } else { None };
    let report = TransferReport {
        target: target.to_string(),
        pretrain_steps,
        shots,
        records,
        aggregate,
    };
    write_json(&out.join("transfer.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub scores: Vec<(String, f64)>,
}

/// Scores a checkpoint on the `dev` or `test` split of every configured task.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, split: &str, out: Option<&Path>) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?.model;
    let tasks = cfg.load_tasks()?;
    let mut scores = Vec::new();
    for (spec, data) in &tasks {
        let examples = match split {
            "dev" => &data.dev,
            "test" => &data.test,
            other => return Err(Error::config("split", format!("unknown split `{other}`"))),
        };
        if model.head(&spec.id).is_none() || examples.is_empty() {
            continue;
        }
        scores.push((spec.id.clone(), evaluate(&model, spec, examples)?));
    }
    let report = EvalReport {
        split: split.to_string(),
        scores,
    };
    if let Some(out) = out {
        mkdir(out)?;
        write_json(&out.join(format!("eval_{split}.json")), &report)?;
    }
    Ok(report)
}

/// Diagnostics of a stored model: representation generalization over the
/// upper layers, a gradient-similarity matrix, probe weights, and
/// task/text embeddings. Stored training artifacts are re-emitted too.
pub fn analyze(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model;
    let state: Option<TrainerState> = ckpt.extra.as_deref().map(serde_json::from_str).transpose()?;
    let step = state.as_ref().map_or(0, |s| s.step);
    let tasks: Vec<(TaskSpec, TaskData)> = cfg
        .load_tasks()?
        .into_iter()
        .filter(|(s, _)| model.head(&s.id).is_some())
        .collect();
    if tasks.is_empty() {
        return Err(Error::config("tasks", "the checkpoint has no head for any configured task"));
    }
    mkdir(out)?;
    if let Some(s) = &state {
        emit_metrics(&out.join("training"), &s.record, &s.artifacts)?;
    }
    if tasks.len() >= 2 {
        let layers = cfg
            .analysis
            .rep_layers
            .clone()
            .unwrap_or_else(|| upper_layers(model.config.backbone.num_layers));
        let summaries = par_map(&tasks, |(s, d)| task_mean_representations(&model, &s.id, &d.dev, &layers))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let curves = (0..layers.len())
            .map(|i| {
                let at: Vec<_> = summaries.iter().map(|s| s[i].clone()).collect();
                Ok(GenCurve {
                    layer: layers[i],
                    points: vec![(step, representation_generalization(&at)?)],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_text(&out.join("repgen.csv"), &repgen_csv(&curves))?;
    }
    let snaps = par_map(&tasks, |(s, d)| snapshot_task_gradient(&model, s, &d.train, step))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let sims = gradient_similarity_matrix(&snaps)?;
    write_text(&out.join(format!("gradsim_step{step}.csv")), &matrix_csv(&sims))?;
    if !cfg.analysis.skills.is_empty() {
        write_json(&out.join("gradsim_skills.json"), &skill_similarity(&sims, &cfg.skills())?)?;
    }
    if model.probe.is_some() {
        write_text(&out.join("probe.csv"), &probe_csv(&probe_contributions(&model)?))?;
    }
    let e = embedding_similarities(&model, &tasks)?;
    emit_embeddings(out, &e.task, &e.text)
}

/// Writes the configured synthetic suite as JSONL files plus a config that
/// trains on them.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let synth = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::config("synthetic", "gen-data needs a synthetic task source"))?;
    let spec = synth.generator(cfg.backbone.config().vocab_size)?;
    let suite = gen_synthetic_suite(&spec)?;
    mkdir(out)?;
    let mut files = Vec::new();
    for (t, splits) in spec.tasks.iter().zip(&suite.raw) {
        let name = |split: &str| format!("{}.{split}.jsonl", t.task.id);
        write_jsonl_dataset(&out.join(name("train")), &splits.train)?;
        write_jsonl_dataset(&out.join(name("dev")), &splits.dev)?;
        write_jsonl_dataset(&out.join(name("test")), &splits.test)?;
        files.push(crate::config::FileTask {
            task: t.task.clone(),
            train: PathBuf::from(name("train")),
            dev: PathBuf::from(name("dev")),
            test: Some(PathBuf::from(name("test"))),
        });
    }
    write_json(&out.join("generator.json"), &spec)?;
    let mut file_cfg = cfg.clone();
    file_cfg.synthetic = None;
    file_cfg.tasks = files;
    let path = out.join("config.json");
    write_json(&path, &file_cfg)?;
    Ok(path)
}
