//! Task-relatedness diagnostics over read-only model snapshots.
//!
//! Representations are pooled by averaging a layer's output over the
//! non-padding positions of each sequence (`[CLS]` included). Gradient
//! vectors are flattened over the model's shared trainable parameters in
//! [`ParamStore`](crate::param::ParamStore) insertion order.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::MtlModel;
use crate::param::ParamId;
use crate::tasks::{make_batch, task_loss_sum, token_batch, TaskExample, TaskSpec};

/// Examples per forward pass during analysis. Only affects speed.
const CHUNK: usize = 32;

/// Default spacing of gradient snapshots, in optimizer steps.
pub const DEFAULT_SNAPSHOT_INTERVAL: u64 = 2000;

/// Mean pooled representation of one task at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RepSummary {
    pub task: String,
    pub layer: usize,
    pub vector: Vec<f64>,
}

/// Representation generalization of one layer over training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenCurve {
    pub layer: usize,
    pub points: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSnapshot {
    pub task: String,
    pub step: u64,
    pub values: Vec<f64>,
}

/// Symmetric matrix of pairwise cosines. `None` marks pairs involving a
/// zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl SimilarityMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        self.values[i][j]
    }
}

/// Mean similarities within and across skill groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSimilarity {
    pub intra: Vec<(String, Option<f64>)>,
    pub inter: Vec<(String, String, Option<f64>)>,
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0)))
}

/// Indices of the upper half of an `num_layers`-deep encoder.
pub fn upper_layers(num_layers: usize) -> Vec<usize> {
    (num_layers / 2..num_layers).collect()
}

fn non_empty(examples: &[TaskExample], what: &str) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Contract(format!("{what} needs a non-empty dataset")));
    }
    Ok(())
}

/// Sums of pooled representations at each of `layers`.
fn pooled_sums(model: &MtlModel, examples: &[TaskExample], layers: &[usize]) -> Result<Vec<Vec<f64>>> {
    let num_layers = model.config.backbone.num_layers;
    if let Some(&bad) = layers.iter().find(|&&l| l >= num_layers) {
        return Err(Error::Contract(format!("layer {bad} out of range for {num_layers} layers")));
    }
    let d = model.config.backbone.model_dim;
    let mut sums = vec![vec![0.0; d]; layers.len()];
    for chunk in examples.chunks(CHUNK) {
        let refs: Vec<&TaskExample> = chunk.iter().collect();
        let batch = token_batch(&refs, model.config.backbone.max_seq_len)?;
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &batch)?;
        for (sum, &l) in sums.iter_mut().zip(layers) {
            for v in enc.mean_pooled(&tape, l)? {
                for (s, x) in sum.iter_mut().zip(&v) {
                    *s += x;
                }
            }
        }
    }
    Ok(sums)
}

/// Mean pooled representations of `task` at several layers.
pub fn task_mean_representations(
    model: &MtlModel,
    task: &str,
    examples: &[TaskExample],
    layers: &[usize],
) -> Result<Vec<RepSummary>> {
    non_empty(examples, "a task mean representation")?;
    let n = examples.len() as f64;
    Ok(pooled_sums(model, examples, layers)?
        .into_iter()
        .zip(layers)
        .map(|(sum, &layer)| RepSummary {
            task: task.to_string(),
            layer,
            vector: sum.into_iter().map(|s| s / n).collect(),
        })
        .collect())
}

pub fn task_mean_representation(model: &MtlModel, task: &str, examples: &[TaskExample], layer: usize) -> Result<RepSummary> {
    Ok(task_mean_representations(model, task, examples, &[layer])?.remove(0))
}

/// Mean cosine similarity over all unordered task pairs at one layer.
pub fn representation_generalization(summaries: &[RepSummary]) -> Result<f64> {
    if summaries.len() < 2 {
        return Err(Error::Contract(format!(
            "representation generalization needs at least 2 tasks, got {}",
            summaries.len()
        )));
    }
    if summaries.iter().any(|s| s.layer != summaries[0].layer) {
        return Err(Error::Contract("representation summaries come from different layers".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..summaries.len() {
        for j in i + 1..summaries.len() {
            let c = cosine(&summaries[i].vector, &summaries[j].vector)?.ok_or_else(|| {
                Error::Contract(format!(
                    "zero mean representation for `{}` or `{}`",
                    summaries[i].task, summaries[j].task
                ))
            })?;
            total += c;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Flattened gradient of the mean loss of `examples`, over `ids`.
fn mean_loss_gradient(model: &MtlModel, spec: &TaskSpec, examples: &[TaskExample], ids: &[ParamId]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; ids.iter().map(|&id| model.store.value(id).len()).sum()];
    let mut count = 0usize;
    for chunk in examples.chunks(CHUNK) {
        let refs: Vec<&TaskExample> = chunk.iter().collect();
        let (batch, labels) = make_batch(&refs, &spec.kind, model.config.backbone.max_seq_len)?;
        let mut tape = Tape::new();
        let (_, preds) = model.forward_task(&mut tape, &spec.id, &batch)?;
        let (loss, n) = task_loss_sum(&mut tape, &spec.kind, preds, &labels)?;
        let grads = tape.backward(loss)?;
        for (a, g) in acc.iter_mut().zip(grads.flatten(&model.store, ids)) {
            *a += g;
        }
        count += n;
    }
    if count > 0 {
        acc.iter_mut().for_each(|a| *a /= count as f64);
    }
    Ok(acc)
}

/// Whether a snapshot is due at `step`.
pub fn at_cadence(step: u64, interval: u64) -> bool {
    interval > 0 && step > 0 && step % interval == 0
}

/// Gradient of the task's mean training loss with respect to the shared
/// trainable parameters. Leaves the model untouched.
pub fn snapshot_task_gradient(model: &MtlModel, spec: &TaskSpec, train: &[TaskExample], step: u64) -> Result<GradientSnapshot> {
    non_empty(train, "a gradient snapshot")?;
    let ids = model.shared_trainable();
    Ok(GradientSnapshot {
        task: spec.id.clone(),
        step,
        values: mean_loss_gradient(model, spec, train, &ids)?,
    })
}

/// Snapshot at `step` when it falls on the cadence, otherwise `None`.
pub fn maybe_snapshot(
    model: &MtlModel,
    spec: &TaskSpec,
    train: &[TaskExample],
    step: u64,
    interval: u64,
) -> Result<Option<GradientSnapshot>> {
    if !at_cadence(step, interval) {
        return Ok(None);
    }
    snapshot_task_gradient(model, spec, train, step).map(Some)
}

/// Pairwise cosines between labelled vectors.
pub fn similarity_matrix(labels: Vec<String>, vectors: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    if labels.len() != vectors.len() {
        return Err(Error::Contract(format!("{} labels for {} vectors", labels.len(), vectors.len())));
    }
    let n = vectors.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let c = cosine(&vectors[i], &vectors[j])?;
            values[i][j] = c;
            values[j][i] = c;
        }
    }
    Ok(SimilarityMatrix { labels, values })
}

pub fn gradient_similarity_matrix(snapshots: &[GradientSnapshot]) -> Result<SimilarityMatrix> {
    let Some(first) = snapshots.first() else {
        return Err(Error::Contract("no gradient snapshots".into()));
    };
    for s in snapshots {
        if s.step != first.step {
            return Err(Error::Contract(format!("snapshots from steps {} and {}", first.step, s.step)));
        }
        if s.values.len() != first.values.len() {
            return Err(Error::Contract(format!(
                "snapshot of `{}` has length {}, expected {}",
                s.task,
                s.values.len(),
                first.values.len()
            )));
        }
    }
    let vectors: Vec<Vec<f64>> = snapshots.iter().map(|s| s.values.clone()).collect();
    similarity_matrix(snapshots.iter().map(|s| s.task.clone()).collect(), &vectors)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Averages off-diagonal entries within each skill and across each pair of
/// skills. `skills` maps every task label to its skill.
pub fn skill_similarity(matrix: &SimilarityMatrix, skills: &[(String, String)]) -> Result<SkillSimilarity> {
    let skill_of: Vec<&str> = matrix
        .labels
        .iter()
        .map(|t| {
            skills
                .iter()
                .find(|(task, _)| task == t)
                .map(|(_, s)| s.as_str())
                .ok_or_else(|| Error::config("skills", format!("task `{t}` has no skill")))
        })
        .collect::<Result<_>>()?;
    let mut names: Vec<&str> = Vec::new();
    for s in &skill_of {
        if !names.contains(s) {
            names.push(s);
        }
    }
    let n = matrix.labels.len();
    let pairs = |a: &str, b: &str| {
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let (si, sj) = (skill_of[i], skill_of[j]);
                if (si == a && sj == b) || (si == b && sj == a) {
                    out.push(matrix.values[i][j]);
                }
            }
        }
        out
    };
    let intra = names
        .iter()
        .map(|&s| (s.to_string(), mean(pairs(s, s).into_iter())))
        .collect();
    let mut inter = Vec::new();
    for (i, &a) in names.iter().enumerate() {
        for &b in &names[i + 1..] {
            inter.push((a.to_string(), b.to_string(), mean(pairs(a, b).into_iter())));
        }
    }
    Ok(SkillSimilarity { intra, inter })
}

/// Backbone-branch weight `w` of every probed layer.
pub fn probe_contributions(model: &MtlModel) -> Result<Vec<f64>> {
    let probe = model
        .probe
        .as_ref()
        .ok_or_else(|| Error::config("probe", "the model was built without contribution probing"))?;
    Ok(probe.weights(&model.store))
}

/// Diagonal empirical Fisher: the mean over examples of the squared
/// per-example loss gradient with respect to shared trainable parameters.
pub fn task_embedding(model: &MtlModel, spec: &TaskSpec, examples: &[TaskExample]) -> Result<Vec<f64>> {
    non_empty(examples, "a task embedding")?;
    let ids = model.shared_trainable();
    let mut acc = vec![0.0; ids.iter().map(|&id| model.store.value(id).len()).sum()];
    for e in examples {
        let g = mean_loss_gradient(model, spec, std::slice::from_ref(e), &ids)?;
        for (a, x) in acc.iter_mut().zip(g) {
            *a += x * x;
        }
    }
    let n = examples.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Mean final-layer pooled representation.
pub fn text_embedding(model: &MtlModel, examples: &[TaskExample]) -> Result<Vec<f64>> {
    let last = model.config.backbone.num_layers - 1;
    Ok(task_mean_representation(model, "", examples, last)?.vector)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::ModelConfig;
    use crate::tasks::{Label, Metric, TaskKind};
    use rand::{Rng, SeedableRng};

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            vocab_size: 30,
            max_seq_len: 10,
            padding_token_id: 0,
        }
    }

    fn model() -> (MtlModel, TaskSpec) {
        let spec = TaskSpec::new("A", TaskKind::SeqClassification { num_classes: 3 }, Metric::Accuracy);
        let cfg = ModelConfig::new(tiny(), Some(4), 3).with_head("A", spec.kind.clone());
        let mut m = MtlModel::new(cfg).unwrap();
        m.set_backbone_trainable(false);
        (m, spec)
    }

    fn examples(n: usize) -> Vec<TaskExample> {
        (0..n)
            .map(|i| TaskExample {
                tokens: (0..3 + i % 3).map(|j| 5 + (i * 7 + j * 3) % 20).collect(),
                label: Label::Class(i % 3),
                latent: None,
            })
            .collect()
    }

    fn rep(task: &str, v: Vec<f64>) -> RepSummary {
        RepSummary {
            task: task.into(),
            layer: 1,
            vector: v,
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), Some(0.0));
        assert_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), Some(1.0));
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), None);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn generalization_of_identical_and_pairs() {
        let same = vec![rep("a", vec![1.0, 2.0]), rep("b", vec![1.0, 2.0]), rep("c", vec![1.0, 2.0])];
        assert!((representation_generalization(&same).unwrap() - 1.0).abs() < 1e-15);
        let two = vec![rep("a", vec![1.0, 0.0]), rep("b", vec![1.0, 1.0])];
        let g = representation_generalization(&two).unwrap();
        assert!((g - cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap().unwrap()).abs() < 1e-15);
        assert!(representation_generalization(&two[..1]).is_err());
    }

    #[test]
    fn generalization_matches_pair_enumeration_and_ignores_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let vs: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let sums: Vec<RepSummary> = vs.iter().enumerate().map(|(i, v)| rep(&i.to_string(), v.clone())).collect();
        let oracle_cos = |a: &[f64], b: &[f64]| {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for k in 0..a.len() {
                dot += a[k] * b[k];
                na += a[k] * a[k];
                nb += b[k] * b[k];
            }
            dot / (na.sqrt() * nb.sqrt())
        };
        let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        let oracle = pairs.iter().map(|&(i, j)| oracle_cos(&vs[i], &vs[j])).sum::<f64>() / 6.0;
        let g = representation_generalization(&sums).unwrap();
        assert!((g - oracle).abs() < 1e-12);
        let mut rev = sums.clone();
        rev.reverse();
        assert!((representation_generalization(&rev).unwrap() - g).abs() < 1e-12);
    }

    #[test]
    fn single_example_and_duplicates() {
        let (m, _) = model();
        let ex = examples(3);
        let one = task_mean_representation(&m, "A", &ex[..1], 1).unwrap();
        let refs: Vec<&TaskExample> = ex[..1].iter().collect();
        let batch = token_batch(&refs, 10).unwrap();
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &batch).unwrap();
        assert_eq!(one.vector, enc.mean_pooled(&tape, 1).unwrap()[0]);

        let base = task_mean_representation(&m, "A", &ex, 1).unwrap();
        let doubled: Vec<TaskExample> = ex.iter().flat_map(|e| [e.clone(), e.clone()]).collect();
        let dup = task_mean_representation(&m, "A", &doubled, 1).unwrap();
        for (a, b) in base.vector.iter().zip(&dup.vector) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(task_mean_representation(&m, "A", &[], 1).is_err());
    }

    #[test]
    fn gradient_similarity_examples() {
        let snap = |t: &str, v: Vec<f64>| GradientSnapshot {
            task: t.into(),
            step: 2000,
            values: v,
        };
        let m = gradient_similarity_matrix(&[
            snap("a", vec![1.0, 0.0]),
            snap("b", vec![1.0, 0.0]),
            snap("c", vec![0.0, 3.0]),
            snap("z", vec![0.0, 0.0]),
        ])
        .unwrap();
        assert_eq!(m.get("a", "b"), Some(1.0));
        assert_eq!(m.get("a", "c"), Some(0.0));
        assert_eq!(m.get("a", "z"), None);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.values[i][j], m.values[j][i]);
            }
        }
        let mut late = snap("d", vec![1.0, 1.0]);
        late.step = 4000;
        assert!(gradient_similarity_matrix(&[snap("a", vec![1.0, 0.0]), late]).is_err());
    }

    #[test]
    fn skill_means() {
        let m = SimilarityMatrix {
            labels: vec!["a".into(), "b".into(), "c".into()],
            values: vec![
                vec![Some(1.0), Some(0.5), Some(0.1)],
                vec![Some(0.5), Some(1.0), Some(0.3)],
                vec![Some(0.1), Some(0.3), Some(1.0)],
            ],
        };
        let skills = [("a", "x"), ("b", "x"), ("c", "y")].map(|(t, s)| (t.to_string(), s.to_string()));
        let s = skill_similarity(&m, &skills).unwrap();
        assert_eq!(s.intra, vec![("x".to_string(), Some(0.5)), ("y".to_string(), None)]);
        assert_eq!(s.inter.len(), 1);
        assert!((s.inter[0].2.unwrap() - 0.2).abs() < 1e-15);
        assert!(skill_similarity(&m, &skills[..2]).is_err());
    }

    #[test]
    fn snapshot_is_pure_and_sized() {
        let (m, spec) = model();
        let before = m.clone();
        let ex = examples(5);
        let a = snapshot_task_gradient(&m, &spec, &ex, 2000).unwrap();
        let b = snapshot_task_gradient(&m, &spec, &ex, 2000).unwrap();
        assert_eq!(a, b);
        let shared: usize = m.shared_trainable().iter().map(|&id| m.store.value(id).len()).sum();
        assert_eq!(a.values.len(), shared);
        for (id, p) in before.store.iter() {
            assert!(p.value.bit_eq(m.store.value(id)));
        }
        assert!(maybe_snapshot(&m, &spec, &ex, 1999, 2000).unwrap().is_none());
        assert!(maybe_snapshot(&m, &spec, &ex, 4000, 2000).unwrap().is_some());
    }

    #[test]
    fn probe_requires_probing() {
        let (m, _) = model();
        assert!(matches!(probe_contributions(&m), Err(Error::Config { .. })));
    }

    #[test]
    fn embeddings() {
        let (mut m, spec) = model();
        let ex = examples(4);
        let a = task_embedding(&m, &spec, &ex).unwrap();
        assert_eq!(a, task_embedding(&m, &spec, &ex).unwrap());
        assert!(a.iter().all(|&x| x >= 0.0));
        let head = m.head("A").unwrap().linear.clone();
        for id in head.params().collect::<Vec<_>>() {
            let z = crate::tensor::Tensor::zeros(m.store.value(id).shape());
            m.store.set_value(id, z).unwrap();
        }
        assert!(task_embedding(&m, &spec, &ex).unwrap().iter().all(|&x| x == 0.0));

        let t = text_embedding(&m, &ex).unwrap();
        assert!((cosine(&t, &t).unwrap().unwrap() - 1.0).abs() < 1e-9);
        let one = text_embedding(&m, &ex[..1]).unwrap();
        assert_eq!(one, task_mean_representation(&m, "A", &ex[..1], 1).unwrap().vector);
    }
}
