//! Joint training over a mixed batch stream, with per-task best-checkpoint
//! tracking, single-task mode, and few-shot transfer.

mod batching;
mod record;
mod trainer;
mod transfer;

pub use batching::{build_mixed_batches, epoch_len, sampling_shares, BatchRef, BatchStream};
pub use record::{aggregate_seeds, select_best, BestCheckpoint, EvalPoint, RunRecord, SeedAggregate, StepLoss, TaskAggregate, TaskRecord};
pub use trainer::{evaluate, plan_fingerprint, run_training, train_step, RunArtifacts, TrainOutcome, Trainer, TrainerState};
pub use transfer::{sample_shots, transfer_finetune, transfer_model, Shots, TransferOutcome};

use serde::{Deserialize, Serialize};

use crate::analysis::DEFAULT_SNAPSHOT_INTERVAL;
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;

pub const DEFAULT_EPOCHS: u64 = 40;
pub const MTL_EVAL_INTERVAL: u64 = 200;
pub const STL_EVAL_INTERVAL: u64 = 50;
pub const TRANSFER_EPOCHS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Stl,
    Mtl,
}

impl Mode {
    pub fn default_eval_interval(self) -> u64 {
        match self {
            Mode::Stl => STL_EVAL_INTERVAL,
            Mode::Mtl => MTL_EVAL_INTERVAL,
        }
    }
}

fn default_snapshot_interval() -> u64 {
    DEFAULT_SNAPSHOT_INTERVAL
}

/// Diagnostics collected during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisPlan {
    /// Track representation generalization at eval points.
    #[serde(default)]
    pub rep_gen: bool,
    /// Rep-gen spacing in steps; a multiple of the eval interval. Defaults to every eval.
    #[serde(default)]
    pub rep_gen_interval: Option<u64>,
    /// Layers to report; defaults to the upper half of the encoder.
    #[serde(default)]
    pub rep_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub grad_snapshots: bool,
    #[serde(default = "default_snapshot_interval")]
    pub snapshot_interval: u64,
}

impl Default for AnalysisPlan {
    fn default() -> Self {
        Self {
            rep_gen: false,
            rep_gen_interval: None,
            rep_layers: None,
            grad_snapshots: false,
            snapshot_interval: DEFAULT_SNAPSHOT_INTERVAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub mode: Mode,
    pub epochs: u64,
    pub eval_interval: u64,
    pub seed: u64,
    pub temperature: f64,
    pub freeze_backbone: bool,
    /// Optional cap on optimizer steps, applied after `epochs`.
    pub max_steps: Option<u64>,
    pub optimizer: OptimizerConfig,
    pub analysis: AnalysisPlan,
}

impl TrainPlan {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            epochs: DEFAULT_EPOCHS,
            eval_interval: mode.default_eval_interval(),
            seed,
            temperature: 1.0,
            freeze_backbone: true,
            max_steps: None,
            optimizer: OptimizerConfig::default(),
            analysis: AnalysisPlan::default(),
        }
    }

    pub fn mtl(seed: u64) -> Self {
        Self::new(Mode::Mtl, seed)
    }

    pub fn stl(seed: u64) -> Self {
        Self::new(Mode::Stl, seed)
    }

    /// Few-shot fine-tuning defaults.
    pub fn transfer(seed: u64) -> Self {
        Self {
            epochs: TRANSFER_EPOCHS,
            ..Self::stl(seed)
        }
    }

    pub fn rep_gen_interval(&self) -> u64 {
        self.analysis.rep_gen_interval.unwrap_or(self.eval_interval)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps", "must be positive"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive and finite"));
        }
        let rg = self.rep_gen_interval();
        if rg == 0 || rg % self.eval_interval != 0 {
            return Err(Error::config(
                "analysis.rep_gen_interval",
                format!("{rg} is not a positive multiple of eval_interval {}", self.eval_interval),
            ));
        }
        if self.analysis.grad_snapshots && self.analysis.snapshot_interval == 0 {
            return Err(Error::config("analysis.snapshot_interval", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.base_lr.is_finite() && o.base_lr >= 0.0) {
            return Err(Error::config("optimizer.base_lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer.beta1", "betas must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}
