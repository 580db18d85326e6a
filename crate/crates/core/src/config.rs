//! Run configuration files (JSON). Unknown keys are rejected.
//!
//! ```json
//! {
//!   "backbone": "toy",
//!   "spal_hidden": 204,
//!   "synthetic": {"findata_like": {"relatedness": 0.5, "seed": 7}},
//!   "plan": {"mode": "mtl", "epochs": 40, "max_steps": 2000},
//!   "analysis": {"rep_gen": true, "grad_snapshots": true}
//! }
//! ```
//!
//! Keys:
//! - `backbone`: `"toy"` or `"bert-base"`.
//! - `spal_hidden`: SPAL width, or `null` for no SPALs.
//! - `backbone_seed`: seed of the backbone initialization (default 0).
//! - `synthetic`: `{"findata_like": {...}}` or `{"custom": <generator spec>}`.
//! - `tasks`: dataset files, `[{"task": <task spec>, "train": path, "dev": path, "test": path?}]`.
//!   Exactly one of `synthetic` and `tasks` is given.
//! - `plan`: `mode`, `epochs`, `eval_interval`, `temperature`, `freeze_backbone`,
//!   `max_steps`, `optimizer` (`base_lr`, `warmup_steps`, `weight_decay`, `beta1`,
//!   `beta2`, `eps`). Missing keys take the mode's defaults.
//! - `analysis`: `rep_gen`, `rep_gen_interval`, `rep_layers`, `grad_snapshots`,
//!   `snapshot_interval`, `probe`, `embeddings`, `skills` (task → skill).
//! - `out_dir`: default output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::DEFAULT_SNAPSHOT_INTERVAL;
use crate::backbone::BackboneConfig;
use crate::engine::{AnalysisPlan, Mode, TrainPlan};
use crate::error::{Error, Result};
use crate::io::load_jsonl_dataset;
use crate::model::{ModelConfig, MtlModel};
use crate::optim::OptimizerConfig;
use crate::spal::SpalConfig;
use crate::synth::{gen_synthetic_suite, GeneratorSpec, SplitSizes};
use crate::tasks::{TaskData, TaskSpec};

/// Batch sizes of the six financial-benchmark roles, in suite order.
pub const FINDATA_BATCH_SIZES: [usize; 6] = [16, 16, 24, 32, 16, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    BertBase,
}

impl Preset {
    pub fn config(self) -> BackboneConfig {
        match self {
            Preset::Toy => BackboneConfig::toy(),
            Preset::BertBase => BackboneConfig::bert_base(),
        }
    }
}

fn default_relatedness() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FindataLike {
    #[serde(default = "default_relatedness")]
    pub relatedness: f64,
    #[serde(default)]
    pub seed: u64,
    /// Subset of task ids to keep, in suite order.
    #[serde(default)]
    pub tasks: Option<Vec<String>>,
    /// One batch size for every task.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Use the benchmark's per-role batch sizes instead of 16.
    #[serde(default)]
    pub reference_batch_sizes: bool,
    #[serde(default)]
    pub seq_len: Option<(usize, usize)>,
    /// Multiplies every split size, rounding up.
    #[serde(default)]
    pub size_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticConfig {
    FindataLike(FindataLike),
    Custom(GeneratorSpec),
}

impl SyntheticConfig {
    pub fn generator(&self, vocab_size: usize) -> Result<GeneratorSpec> {
        match self {
            SyntheticConfig::Custom(g) => Ok(g.clone()),
            SyntheticConfig::FindataLike(f) => {
                let mut g = GeneratorSpec::findata_like(vocab_size, f.relatedness, f.seed);
                if f.reference_batch_sizes {
                    for (t, b) in g.tasks.iter_mut().zip(FINDATA_BATCH_SIZES) {
                        t.task.batch_size = b;
                    }
                }
                if let Some(b) = f.batch_size {
                    g.tasks.iter_mut().for_each(|t| t.task.batch_size = b);
                }
                if let Some(keep) = &f.tasks {
                    if let Some(bad) = keep.iter().find(|id| !g.tasks.iter().any(|t| &t.task.id == *id)) {
                        return Err(Error::config("synthetic.findata_like.tasks", format!("unknown task `{bad}`")));
                    }
                    g.tasks.retain(|t| keep.contains(&t.task.id));
                }
                if let Some(s) = f.seq_len {
                    g.seq_len = s;
                }
                if let Some(scale) = f.size_scale {
                    if !(scale.is_finite() && scale > 0.0) {
                        return Err(Error::config("synthetic.findata_like.size_scale", "must be positive"));
                    }
                    let up = |n: usize| ((n as f64 * scale).ceil() as usize).max(1);
                    for t in &mut g.tasks {
                        t.sizes = SplitSizes {
                            train: up(t.sizes.train),
                            dev: up(t.sizes.dev),
                            test: up(t.sizes.test),
                        };
                    }
                }
                Ok(g)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileTask {
    pub task: TaskSpec,
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub mode: Option<Mode>,
    pub epochs: Option<u64>,
    pub eval_interval: Option<u64>,
    pub temperature: Option<f64>,
    pub freeze_backbone: Option<bool>,
    pub max_steps: Option<u64>,
    pub optimizer: Option<OptimizerConfig>,
}

fn default_snapshot_interval() -> u64 {
    DEFAULT_SNAPSHOT_INTERVAL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub rep_gen: bool,
    #[serde(default)]
    pub rep_gen_interval: Option<u64>,
    #[serde(default)]
    pub rep_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub grad_snapshots: bool,
    #[serde(default = "default_snapshot_interval")]
    pub snapshot_interval: u64,
    #[serde(default)]
    pub probe: bool,
    #[serde(default)]
    pub embeddings: bool,
    #[serde(default)]
    pub skills: BTreeMap<String, String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            rep_gen: false,
            rep_gen_interval: None,
            rep_layers: None,
            grad_snapshots: false,
            snapshot_interval: DEFAULT_SNAPSHOT_INTERVAL,
            probe: false,
            embeddings: false,
            skills: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: Preset,
    pub spal_hidden: Option<usize>,
    #[serde(default)]
    pub backbone_seed: u64,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub tasks: Vec<FileTask>,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for t in &mut cfg.tasks {
            for p in [&mut t.train, &mut t.dev].into_iter().chain(t.test.as_mut()) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        for t in &cfg.tasks {
            for p in [&t.train, &t.dev].into_iter().chain(t.test.as_ref()) {
                if !p.is_file() {
                    return Err(Error::config("tasks", format!("dataset file {} does not exist", p.display())));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, self.tasks.is_empty()) {
            (Some(_), false) => return Err(Error::config("tasks", "give either `synthetic` or `tasks`, not both")),
            (None, true) => return Err(Error::config("tasks", "no tasks configured")),
            _ => {}
        }
        let bb = self.backbone.config();
        if let Some(h) = self.spal_hidden {
            SpalConfig {
                hidden_size: h,
                num_heads: bb.num_heads,
            }
            .validate(&bb)
            .map_err(|e| Error::config("spal_hidden", e.to_string()))?;
        }
        if self.analysis.probe && self.spal_hidden.is_none() {
            return Err(Error::config("analysis.probe", "probing requires SPALs"));
        }
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        self.plan.mode.unwrap_or(Mode::Mtl)
    }

    pub fn train_plan(&self, seed: u64) -> TrainPlan {
        let p = &self.plan;
        let mut plan = TrainPlan::new(self.mode(), seed);
        plan.epochs = p.epochs.unwrap_or(plan.epochs);
        plan.eval_interval = p.eval_interval.unwrap_or(plan.eval_interval);
        plan.temperature = p.temperature.unwrap_or(plan.temperature);
        plan.freeze_backbone = p.freeze_backbone.unwrap_or(plan.freeze_backbone);
        plan.max_steps = p.max_steps;
        plan.optimizer = p.optimizer.unwrap_or(plan.optimizer);
        let a = &self.analysis;
        plan.analysis = AnalysisPlan {
            rep_gen: a.rep_gen,
            rep_gen_interval: a.rep_gen_interval,
            rep_layers: a.rep_layers.clone(),
            grad_snapshots: a.grad_snapshots,
            snapshot_interval: a.snapshot_interval,
        };
        plan
    }

    /// Loads or generates every task's splits.
    pub fn load_tasks(&self) -> Result<Vec<(TaskSpec, TaskData)>> {
        let vocab = self.backbone.config().vocab_size;
        if let Some(s) = &self.synthetic {
            return gen_synthetic_suite(&s.generator(vocab)?)?.datasets();
        }
        self.tasks
            .iter()
            .map(|t| {
                t.task.validate()?;
                let data = TaskData {
                    train: load_jsonl_dataset(&t.train, &t.task, vocab)?,
                    dev: load_jsonl_dataset(&t.dev, &t.task, vocab)?,
                    test: match &t.test {
                        Some(p) => load_jsonl_dataset(p, &t.task, vocab)?,
                        None => Vec::new(),
                    },
                };
                if data.train.is_empty() || data.dev.is_empty() {
                    return Err(Error::config("tasks", format!("task `{}` has an empty train or dev file", t.task.id)));
                }
                Ok((t.task.clone(), data))
            })
            .collect()
    }

    /// A fresh model with one head per task. The backbone uses
    /// `backbone_seed`; SPALs and heads use `seed`.
    pub fn build_model(&self, tasks: &[(TaskSpec, TaskData)], seed: u64) -> Result<MtlModel> {
        let mut cfg = ModelConfig::new(self.backbone.config(), self.spal_hidden, seed);
        cfg.backbone_seed = self.backbone_seed;
        cfg.probe = self.analysis.probe;
        for (s, _) in tasks {
            cfg = cfg.with_head(s.id.clone(), s.kind.clone());
        }
        MtlModel::new(cfg)
    }

    pub fn skills(&self) -> Vec<(String, String)> {
        self.analysis.skills.iter().map(|(t, s)| (t.clone(), s.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let ok = r#"{"backbone": "toy", "spal_hidden": 12, "synthetic": {"findata_like": {}}}"#;
        assert!(RunConfig::from_json(ok).is_ok());
        let typo = r#"{"backbone": "toy", "spal_hiden": 12, "synthetic": {"findata_like": {}}}"#;
        assert!(matches!(RunConfig::from_json(typo), Err(Error::Config { .. })));
        let nested = r#"{"backbone": "toy", "spal_hidden": 12, "synthetic": {"findata_like": {}}, "plan": {"epoch": 3}}"#;
        assert!(RunConfig::from_json(nested).is_err());
    }

    #[test]
    fn invalid_hidden_size_for_preset() {
        let bad = r#"{"backbone": "toy", "spal_hidden": 10, "synthetic": {"findata_like": {}}}"#;
        let err = RunConfig::from_json(bad).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "spal_hidden"), "{err}");
    }

    #[test]
    fn missing_dataset_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(
            &p,
            r#"{"backbone": "toy", "spal_hidden": 12, "tasks": [{"task": {"id": "SC", "kind": {"type": "seq_classification", "num_classes": 3}, "metric": "accuracy"}, "train": "a.jsonl", "dev": "b.jsonl"}]}"#,
        )
        .unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config { .. })));
    }

    #[test]
    fn plan_defaults_follow_mode() {
        let cfg = RunConfig::from_json(
            r#"{"backbone": "toy", "spal_hidden": 12, "synthetic": {"findata_like": {"tasks": ["SC"]}}, "plan": {"mode": "stl", "optimizer": {"base_lr": 0.001}}}"#,
        )
        .unwrap();
        let plan = cfg.train_plan(4);
        assert_eq!((plan.eval_interval, plan.epochs, plan.seed), (50, 40, 4));
        assert_eq!(plan.optimizer.base_lr, 0.001);
        assert_eq!(plan.optimizer.warmup_steps, 500);
        assert_eq!(cfg.load_tasks().unwrap().len(), 1);
    }
}
