//! Task definitions, preprocessing, prediction heads, losses and metrics.

pub mod bio;
pub mod markers;
pub mod metrics;
pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Linear, TokenBatch, INIT_STD};
use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::seeding::{normal_tensor, rng};
use crate::synth::Latent;
use crate::tensor::Tensor;

pub use bio::{bio_to_spans, spans_to_bio, Span};
pub use markers::{insert_target_markers, strip_target_markers, MarkerKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    SeqRegression,
    SeqClassification { num_classes: usize },
    TokenClassification { entity_labels: Vec<String> },
}

impl TaskKind {
    /// Width of the head's output layer.
    pub fn output_dim(&self) -> usize {
        match self {
            TaskKind::SeqRegression => 1,
            TaskKind::SeqClassification { num_classes } => *num_classes,
            TaskKind::TokenClassification { entity_labels } => 1 + 2 * entity_labels.len(),
        }
    }

    pub fn is_token_level(&self) -> bool {
        matches!(self, TaskKind::TokenClassification { .. })
    }

    /// Tag names in index order: `O`, then `B-x`, `I-x` per entity label.
    pub fn tag_names(&self) -> Vec<String> {
        match self {
            TaskKind::TokenClassification { entity_labels } => std::iter::once("O".to_string())
                .chain(entity_labels.iter().flat_map(|l| [format!("B-{l}"), format!("I-{l}")]))
                .collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    Accuracy,
    EntityMacroF1,
    TokenAccuracy,
}

impl Metric {
    pub fn lower_is_better(self) -> bool {
        self == Metric::Rmse
    }

    /// True when `a` is a strictly better score than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.lower_is_better() {
            a < b
        } else {
            a > b
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub metric: Metric,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(default)]
    pub marker: Option<MarkerKind>,
}

fn default_batch_size() -> usize {
    16
}

fn default_weight() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, kind: TaskKind, metric: Metric) -> Self {
        Self {
            id: id.into(),
            kind,
            metric,
            batch_size: default_batch_size(),
            weight: default_weight(),
            marker: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("tasks.{}.{f}", self.id);
        match &self.kind {
            TaskKind::SeqClassification { num_classes } if *num_classes < 2 => {
                return Err(Error::config(field("kind"), "needs at least 2 classes"));
            }
            TaskKind::TokenClassification { entity_labels } if entity_labels.is_empty() => {
                return Err(Error::config(field("kind"), "needs at least one entity label"));
            }
            _ => {}
        }
        let compatible = matches!(
            (&self.kind, self.metric),
            (TaskKind::SeqRegression, Metric::Rmse)
                | (TaskKind::SeqClassification { .. }, Metric::Accuracy)
                | (TaskKind::TokenClassification { .. }, Metric::EntityMacroF1 | Metric::TokenAccuracy)
        );
        if !compatible {
            return Err(Error::config(
                field("metric"),
                format!("{:?} cannot score a {:?} task", self.metric, self.kind),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config(field("batch_size"), "must be positive"));
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(Error::config(field("weight"), "must be a positive real"));
        }
        Ok(())
    }
}

/// Label as it appears in a dataset record, before preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub enum RawLabel {
    Score(f64),
    Class(usize),
    Tags(Vec<String>),
    Spans(Vec<Span>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawExample {
    pub tokens: Vec<usize>,
    pub label: RawLabel,
    pub target_span: Option<(usize, usize)>,
    pub latent: Option<Latent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Score(f64),
    Class(usize),
    Tags(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub tokens: Vec<usize>,
    pub label: Label,
    pub latent: Option<Latent>,
}

/// Validates a record against its task and applies preprocessing: target
/// markers, span → BIO conversion, and clamping of regression scores to
/// `[-1, 1]`.
pub fn ingest(raw: RawExample, spec: &TaskSpec) -> Result<TaskExample> {
    if raw.tokens.is_empty() {
        return Err(Error::Data("example has no tokens".into()));
    }
    let len = raw.tokens.len();
    let mut label = match (&spec.kind, raw.label) {
        (TaskKind::SeqRegression, RawLabel::Score(s)) => {
            if !s.is_finite() {
                return Err(Error::Data(format!("non-finite score {s}")));
            }
            Label::Score(s.clamp(-1.0, 1.0))
        }
        (TaskKind::SeqRegression, RawLabel::Class(c)) => Label::Score((c as f64).clamp(-1.0, 1.0)),
        (TaskKind::SeqClassification { num_classes }, RawLabel::Class(c)) => {
            if c >= *num_classes {
                return Err(Error::Data(format!("class {c} outside {num_classes} classes")));
            }
            Label::Class(c)
        }
        (kind @ TaskKind::TokenClassification { .. }, RawLabel::Tags(tags)) => {
            if tags.len() != len {
                return Err(Error::Data(format!(
                    "{} tags for {len} tokens",
                    tags.len()
                )));
            }
            Label::Tags(tag_indices(kind, &tags)?)
        }
        (kind @ TaskKind::TokenClassification { .. }, RawLabel::Spans(spans)) => {
            Label::Tags(tag_indices(kind, &spans_to_bio(len, &spans)?)?)
        }
        (kind, other) => {
            return Err(Error::Data(format!("label {other:?} does not fit a {kind:?} task")));
        }
    };
    let mut tokens = raw.tokens;
    if let (Some(marker), Some((start, end))) = (spec.marker, raw.target_span) {
        tokens = insert_target_markers(&tokens, start, end, marker.token_id())?;
        if let Label::Tags(tags) = &mut label {
            *tags = insert_target_markers(tags, start, end, 0)?;
        }
    } else if let Some((start, end)) = raw.target_span {
        if end < start || end >= len {
            return Err(Error::Data(format!("target span ({start}, {end}) is invalid for length {len}")));
        }
    }
    Ok(TaskExample {
        tokens,
        label,
        latent: raw.latent,
    })
}

fn tag_indices(kind: &TaskKind, tags: &[String]) -> Result<Vec<usize>> {
    let names = kind.tag_names();
    tags.iter()
        .enumerate()
        .map(|(i, t)| {
            names
                .iter()
                .position(|n| n == t)
                .ok_or_else(|| Error::Data(format!("unknown tag `{t}` at position {i}")))
        })
        .collect()
}

/// Per-example targets aligned with a [`TokenBatch`].
#[derive(Debug, Clone)]
pub enum BatchLabels {
    Scores(Vec<f64>),
    Classes(Vec<usize>),
    /// One entry per batch position; `None` for `[CLS]` and padding.
    Tags(Vec<Option<usize>>),
}

/// Prepends `[CLS]`, truncates to `max_seq_len`, and pads.
pub fn token_batch(examples: &[&TaskExample], max_seq_len: usize) -> Result<TokenBatch> {
    let keep = max_seq_len.saturating_sub(1);
    let seqs: Vec<Vec<usize>> = examples
        .iter()
        .map(|e| {
            std::iter::once(vocab::CLS_ID)
                .chain(e.tokens.iter().copied().take(keep))
                .collect()
        })
        .collect();
    TokenBatch::from_sequences(&seqs, vocab::PAD_ID)
}

/// [`token_batch`] plus aligned targets.
pub fn make_batch(examples: &[&TaskExample], kind: &TaskKind, max_seq_len: usize) -> Result<(TokenBatch, BatchLabels)> {
    let keep = max_seq_len.saturating_sub(1);
    let batch = token_batch(examples, max_seq_len)?;
    let labels = match kind {
        TaskKind::SeqRegression => BatchLabels::Scores(
            examples
                .iter()
                .map(|e| match e.label {
                    Label::Score(s) => Ok(s),
                    _ => Err(Error::Data("expected a regression score".into())),
                })
                .collect::<Result<_>>()?,
        ),
        TaskKind::SeqClassification { .. } => BatchLabels::Classes(
            examples
                .iter()
                .map(|e| match e.label {
                    Label::Class(c) => Ok(c),
                    _ => Err(Error::Data("expected a class label".into())),
                })
                .collect::<Result<_>>()?,
        ),
        TaskKind::TokenClassification { .. } => {
            let mut out = vec![None; batch.batch * batch.seq];
            for (b, e) in examples.iter().enumerate() {
                let Label::Tags(tags) = &e.label else {
                    return Err(Error::Data("expected a tag sequence".into()));
                };
                for (i, &t) in tags.iter().take(keep).enumerate() {
                    out[b * batch.seq + 1 + i] = Some(t);
                }
            }
            BatchLabels::Tags(out)
        }
    };
    Ok((batch, labels))
}

/// One affine projection from the encoder width to the task's outputs.
#[derive(Debug, Clone)]
pub struct Head {
    pub task_id: String,
    pub kind: TaskKind,
    pub linear: Linear,
}

impl Head {
    pub fn new(store: &mut ParamStore, task_id: &str, kind: &TaskKind, model_dim: usize, seed: u64) -> Result<Self> {
        let mut r = rng(seed, crate::seeding::fnv1a(task_id.as_bytes()));
        let out = kind.output_dim();
        let w = normal_tensor(&[model_dim, out], INIT_STD, &mut r);
        let linear = Linear::new(
            store,
            &format!("head.{task_id}"),
            ParamGroup::Head(task_id.to_string()),
            model_dim,
            out,
            true,
            w,
        )?;
        Ok(Self {
            task_id: task_id.to_string(),
            kind: kind.clone(),
            linear,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.linear.params().collect()
    }
}

/// First-position (`[CLS]`) representation of every sequence.
pub fn pool_first(tape: &mut Tape, layer_output: Var, batch: &TokenBatch) -> Result<Var> {
    let idx: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq).collect();
    tape.gather_rows(layer_output, &idx)
}

/// Affine projection: regression values, or class logits for classification kinds.
pub fn head_forward(tape: &mut Tape, store: &ParamStore, head: &Head, reps: Var) -> Result<Var> {
    let (_, d) = tape.value(reps).dims2()?;
    let expected = store.value(head.linear.weight).shape()[0];
    if d != expected {
        return Err(Error::Shape(format!(
            "head `{}` expects width {expected}, got {:?}",
            head.task_id,
            tape.value(reps).shape()
        )));
    }
    head.linear.forward(tape, store, reps)
}

/// Summed loss and the number of scored items it covers.
pub fn task_loss_sum(tape: &mut Tape, kind: &TaskKind, predictions: Var, labels: &BatchLabels) -> Result<(Var, usize)> {
    match (kind, labels) {
        (TaskKind::SeqRegression, BatchLabels::Scores(y)) => Ok((tape.squared_error_sum(predictions, y)?, y.len())),
        (TaskKind::SeqClassification { num_classes }, BatchLabels::Classes(y)) => {
            if let Some(&bad) = y.iter().find(|&&c| c >= *num_classes) {
                return Err(Error::Data(format!("label {bad} outside {num_classes} classes")));
            }
            let targets: Vec<Option<usize>> = y.iter().map(|&c| Some(c)).collect();
            Ok((tape.cross_entropy_sum(predictions, &targets)?, y.len()))
        }
        (TaskKind::TokenClassification { .. }, BatchLabels::Tags(y)) => {
            let n = y.iter().filter(|t| t.is_some()).count();
            Ok((tape.cross_entropy_sum(predictions, y)?, n))
        }
        _ => Err(Error::Contract(format!("labels do not match task kind {kind:?}"))),
    }
}

/// Mean squared error for regression, mean negative log-likelihood otherwise.
pub fn task_loss(tape: &mut Tape, kind: &TaskKind, predictions: Var, labels: &BatchLabels) -> Result<Var> {
    let (sum, n) = task_loss_sum(tape, kind, predictions, labels)?;
    if n == 0 {
        return Err(Error::Data("batch has no scored positions".into()));
    }
    Ok(tape.scale(sum, 1.0 / n as f64))
}

/// Decoded predictions for a whole evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Scores(Vec<f64>),
    Classes(Vec<usize>),
    Tags(Vec<Vec<usize>>),
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Predictions {
    pub fn empty(kind: &TaskKind) -> Self {
        match kind {
            TaskKind::SeqRegression => Predictions::Scores(Vec::new()),
            TaskKind::SeqClassification { .. } => Predictions::Classes(Vec::new()),
            TaskKind::TokenClassification { .. } => Predictions::Tags(Vec::new()),
        }
    }

    /// Appends the decoded head output of one batch.
    pub fn extend_from(&mut self, output: &Tensor, batch: &TokenBatch) -> Result<()> {
        let (_, k) = output.dims2()?;
        match self {
            Predictions::Scores(v) => v.extend_from_slice(output.data()),
            Predictions::Classes(v) => v.extend(output.data().chunks(k).map(argmax)),
            Predictions::Tags(v) => {
                for b in 0..batch.batch {
                    let n = batch.real_len(b);
                    v.push((1..n).map(|i| argmax(output.row(b * batch.seq + i))).collect());
                }
            }
        }
        Ok(())
    }
}

/// Scores predictions against gold labels with the task's metric.
pub fn task_metric(spec: &TaskSpec, predictions: &Predictions, gold: &[Label]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Contract(format!("task `{}` has an empty evaluation split", spec.id)));
    }
    let mismatch = || Error::Contract(format!("predictions do not match labels of task `{}`", spec.id));
    match (spec.metric, predictions) {
        (Metric::Rmse, Predictions::Scores(p)) => {
            let g: Vec<f64> = gold
                .iter()
                .map(|l| match l {
                    Label::Score(s) => Ok(*s),
                    _ => Err(mismatch()),
                })
                .collect::<Result<_>>()?;
            metrics::rmse(p, &g)
        }
        (Metric::Accuracy, Predictions::Classes(p)) => {
            let g: Vec<usize> = gold
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c),
                    _ => Err(mismatch()),
                })
                .collect::<Result<_>>()?;
            metrics::accuracy(p, &g)
        }
        (metric @ (Metric::TokenAccuracy | Metric::EntityMacroF1), Predictions::Tags(p)) => {
            let g: Vec<Vec<usize>> = gold
                .iter()
                .zip(p)
                .map(|(l, pr)| match l {
                    Label::Tags(t) => Ok(t.iter().copied().take(pr.len()).collect()),
                    _ => Err(mismatch()),
                })
                .collect::<Result<_>>()?;
            if metric == Metric::TokenAccuracy {
                metrics::token_accuracy(p, &g)
            } else {
                let names = spec.kind.tag_names();
                let to_names = |s: &Vec<Vec<usize>>| -> Vec<Vec<&str>> {
                    s.iter().map(|t| t.iter().map(|&i| names[i].as_str()).collect()).collect()
                };
                metrics::entity_macro_f1(&to_names(p), &to_names(&g))
            }
        }
        _ => Err(mismatch()),
    }
}

/// Train/dev/test splits of one task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

pub type TaskData = Splits<TaskExample>;

impl<T> Splits<T> {
    pub fn map<U>(self, mut f: impl FnMut(T) -> Result<U>) -> Result<Splits<U>> {
        Ok(Splits {
            train: self.train.into_iter().map(&mut f).collect::<Result<_>>()?,
            dev: self.dev.into_iter().map(&mut f).collect::<Result<_>>()?,
            test: self.test.into_iter().map(&mut f).collect::<Result<_>>()?,
        })
    }
}
