//! Synthetic multi-task corpora with a controllable relatedness knob.
//!
//! Every example carries two sign vectors: a shared latent `s` common to all
//! tasks and a task-private latent `p`. Each sign is rendered as one token, so
//! the latents are fully readable from the text. A task scores an example as
//!
//! ```text
//! z = ρ·(u·s) + (1−ρ)·(v_t·p)
//! ```
//!
//! with `u` a unit direction shared by every task and `v_t` a unit direction
//! private to task `t`. Labels are deterministic functions of `z / σ`, where
//! `σ = sqrt(ρ² + (1−ρ)²)` keeps the scale comparable across `ρ`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{fnv1a, rng};
use crate::tasks::{
    ingest, vocab::FIRST_FREE_ID, MarkerKind, Metric, RawExample, RawLabel, Span, Splits, TaskData, TaskKind,
    TaskSpec,
};

/// Default split seed, matching the common convention for fixed splits.
pub const DEFAULT_SPLIT_SEED: u64 = 42;
const SPAN_TOKENS: usize = 8;
const MIN_FILLER_TOKENS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latent {
    pub shared: Vec<i8>,
    pub private: Vec<i8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTask {
    pub task: TaskSpec,
    pub sizes: SplitSizes,
    /// Weight ρ ∈ [0, 1] of the shared latent in the label score.
    pub relatedness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub vocab_size: usize,
    /// Inclusive range of sequence lengths before markers.
    pub seq_len: (usize, usize),
    pub latent_dim: usize,
    pub seed: u64,
    pub tasks: Vec<SynthTask>,
}

fn sizes(train: usize, dev: usize, test: usize) -> SplitSizes {
    SplitSizes { train, dev, test }
}

impl GeneratorSpec {
    /// Six tasks shaped like the financial benchmark roles, at one tenth of
    /// the original split sizes.
    pub fn findata_like(vocab_size: usize, relatedness: f64, seed: u64) -> Self {
        let task = |id: &str, kind: TaskKind, metric: Metric, marker: Option<MarkerKind>| {
            let mut t = TaskSpec::new(id, kind, metric);
            t.marker = marker;
            t
        };
        let labels = |ls: &[&str]| ls.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let tasks = vec![
            (
                task("TSA", TaskKind::SeqRegression, Metric::Rmse, Some(MarkerKind::Company)),
                sizes(91, 23, 56),
            ),
            (
                task("SC", TaskKind::SeqClassification { num_classes: 3 }, Metric::Accuracy, None),
                sizes(387, 48, 48),
            ),
            (
                task(
                    "NC",
                    TaskKind::SeqClassification { num_classes: 4 },
                    Metric::Accuracy,
                    Some(MarkerKind::Number),
                ),
                sizes(667, 167, 119),
            ),
            (
                task(
                    "NAD",
                    TaskKind::SeqClassification { num_classes: 2 },
                    Metric::Accuracy,
                    Some(MarkerKind::Number),
                ),
                sizes(719, 104, 211),
            ),
            (
                task(
                    "FSRL",
                    TaskKind::TokenClassification {
                        entity_labels: labels(&["QUANT", "TIME", "THEME"]),
                    },
                    Metric::EntityMacroF1,
                    None,
                ),
                sizes(90, 10, 10),
            ),
            (
                task(
                    "CD",
                    TaskKind::TokenClassification {
                        entity_labels: labels(&["CAUSE", "EFFECT"]),
                    },
                    Metric::TokenAccuracy,
                    None,
                ),
                sizes(67, 23, 23),
            ),
        ];
        Self {
            vocab_size,
            seq_len: (12, 20),
            latent_dim: 4,
            seed,
            tasks: tasks
                .into_iter()
                .map(|(task, sizes)| SynthTask {
                    task,
                    sizes,
                    relatedness,
                })
                .collect(),
        }
    }

    fn private_base(&self, t: usize) -> usize {
        FIRST_FREE_ID + 2 * self.latent_dim * (1 + t)
    }

    fn span_base(&self) -> usize {
        self.private_base(self.tasks.len())
    }

    fn filler_base(&self) -> usize {
        self.span_base() + SPAN_TOKENS
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be positive"));
        }
        if self.vocab_size < self.filler_base() + MIN_FILLER_TOKENS {
            return Err(Error::config(
                "vocab_size",
                format!("needs at least {} ids for this suite", self.filler_base() + MIN_FILLER_TOKENS),
            ));
        }
        let (lo, hi) = self.seq_len;
        if lo > hi || lo < 2 * self.latent_dim + 3 {
            return Err(Error::config(
                "seq_len",
                format!("range must be ordered and start at ≥ {}", 2 * self.latent_dim + 3),
            ));
        }
        for t in &self.tasks {
            t.task.validate()?;
            if !(0.0..=1.0).contains(&t.relatedness) {
                return Err(Error::config(
                    format!("tasks.{}.relatedness", t.task.id),
                    format!("{} is outside [0, 1]", t.relatedness),
                ));
            }
            if t.sizes.train == 0 || t.sizes.dev == 0 || t.sizes.test == 0 {
                return Err(Error::config(format!("tasks.{}.sizes", t.task.id), "split sizes must be positive"));
            }
        }
        Ok(())
    }
}

/// Smooth approximation of the standard normal CDF.
fn normal_cdf_approx(x: f64) -> f64 {
    0.5 * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}

fn unit_direction(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Label functions of one generated suite.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelModel {
    pub shared_direction: Vec<f64>,
    pub private_directions: Vec<Vec<f64>>,
    pub relatedness: Vec<f64>,
}

impl LabelModel {
    pub fn score(&self, task: usize, latent: &Latent) -> f64 {
        let rho = self.relatedness[task];
        let dot = |d: &[f64], s: &[i8]| d.iter().zip(s).map(|(a, &b)| a * b as f64).sum::<f64>();
        let z = rho * dot(&self.shared_direction, &latent.shared)
            + (1.0 - rho) * dot(&self.private_directions[task], &latent.private);
        z / (rho * rho + (1.0 - rho) * (1.0 - rho)).sqrt()
    }

    /// Class in `0..n` from quantile bins of the normalized score.
    pub fn class(&self, task: usize, latent: &Latent, n: usize) -> usize {
        ((n as f64 * normal_cdf_approx(self.score(task, latent))) as usize).min(n - 1)
    }

    pub fn regression(&self, task: usize, latent: &Latent) -> f64 {
        self.score(task, latent).tanh()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSuite {
    pub spec: GeneratorSpec,
    pub labels: LabelModel,
    pub raw: Vec<Splits<RawExample>>,
}

impl SyntheticSuite {
    /// Preprocessed datasets, in task order.
    pub fn datasets(&self) -> Result<Vec<(TaskSpec, TaskData)>> {
        self.spec
            .tasks
            .iter()
            .zip(&self.raw)
            .map(|(t, raw)| Ok((t.task.clone(), raw.clone().map(|r| ingest(r, &t.task))?)))
            .collect()
    }
}

pub fn gen_synthetic_suite(spec: &GeneratorSpec) -> Result<SyntheticSuite> {
    spec.validate()?;
    let k = spec.latent_dim;
    let labels = LabelModel {
        shared_direction: unit_direction(&mut rng(spec.seed, 0x5a4ed), k),
        private_directions: spec
            .tasks
            .iter()
            .map(|t| unit_direction(&mut rng(spec.seed, fnv1a(t.task.id.as_bytes()) ^ 0xd1), k))
            .collect(),
        relatedness: spec.tasks.iter().map(|t| t.relatedness).collect(),
    };
    let raw = spec
        .tasks
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            let mut r = rng(spec.seed, fnv1a(t.task.id.as_bytes()));
            let n = t.sizes.train + t.sizes.dev + t.sizes.test;
            let all: Vec<RawExample> = (0..n).map(|_| gen_example(spec, &labels, ti, &mut r)).collect();
            let [train, dev, test] = split_by_counts(all, [t.sizes.train, t.sizes.dev], DEFAULT_SPLIT_SEED)?;
            Ok(Splits { train, dev, test })
        })
        .collect::<Result<_>>()?;
    Ok(SyntheticSuite {
        spec: spec.clone(),
        labels,
        raw,
    })
}

fn gen_example(spec: &GeneratorSpec, labels: &LabelModel, ti: usize, r: &mut ChaCha8Rng) -> RawExample {
    let k = spec.latent_dim;
    let task = &spec.tasks[ti].task;
    let sign = |r: &mut ChaCha8Rng| if r.gen::<bool>() { 1i8 } else { -1i8 };
    let latent = Latent {
        shared: (0..k).map(|_| sign(r)).collect(),
        private: (0..k).map(|_| sign(r)).collect(),
    };
    let feature = |base: usize, j: usize, s: i8| base + 2 * j + usize::from(s > 0);
    let mut tokens: Vec<usize> = latent
        .shared
        .iter()
        .enumerate()
        .map(|(j, &s)| feature(FIRST_FREE_ID, j, s))
        .chain(
            latent
                .private
                .iter()
                .enumerate()
                .map(|(j, &s)| feature(spec.private_base(ti), j, s)),
        )
        .collect();
    let len = r.gen_range(spec.seq_len.0..=spec.seq_len.1);
    let filler_base = spec.filler_base();
    while tokens.len() < len {
        tokens.push(r.gen_range(filler_base..spec.vocab_size));
    }
    tokens.shuffle(r);

    let label = match &task.kind {
        TaskKind::SeqRegression => RawLabel::Score(labels.regression(ti, &latent)),
        TaskKind::SeqClassification { num_classes } => RawLabel::Class(labels.class(ti, &latent, *num_classes)),
        TaskKind::TokenClassification { entity_labels } => {
            let width = r.gen_range(1..=3usize);
            let start = r.gen_range(0..=tokens.len());
            let span_tokens: Vec<usize> = (0..width).map(|_| spec.span_base() + r.gen_range(0..SPAN_TOKENS)).collect();
            tokens.splice(start..start, span_tokens);
            let which = labels.class(ti, &latent, entity_labels.len());
            RawLabel::Spans(vec![Span::new(start, start + width - 1, entity_labels[which].clone())])
        }
    };
    let target_span = task.marker.map(|_| {
        let fillers: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] >= filler_base).collect();
        let p = fillers[r.gen_range(0..fillers.len())];
        (p, p)
    });
    RawExample {
        tokens,
        label,
        target_span,
        latent: Some(latent),
    }
}

fn split_by_counts<T>(mut data: Vec<T>, counts: [usize; 2], seed: u64) -> Result<[Vec<T>; 3]> {
    if counts[0] + counts[1] > data.len() {
        return Err(Error::config("fractions", "split counts exceed the dataset size"));
    }
    data.shuffle(&mut rng(seed, 0x5911_7));
    let test = data.split_off(counts[0] + counts[1]);
    let dev = data.split_off(counts[0]);
    Ok([data, dev, test])
}

/// Deterministic shuffled split. Train and dev sizes are `floor(f·n)`; the
/// test split takes the remainder.
pub fn split_dataset<T>(data: Vec<T>, fractions: [f64; 3], seed: u64) -> Result<[Vec<T>; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("fractions", format!("{fractions:?} must be non-negative and sum to 1")));
    }
    let n = data.len() as f64;
    let train = (fractions[0] * n).floor() as usize;
    let dev = (fractions[1] * n).floor() as usize;
    split_by_counts(data, [train, dev], seed)
}
