//! Independent reference implementations used as test oracles.
//!
//! Everything here works one unpadded sequence at a time with plain loops
//! over parameter values looked up by name, sharing no code with the tape.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spalmtl::autodiff::Tape;
use spalmtl::engine::{Mode, TrainPlan, Trainer, TrainerState};
use spalmtl::io::{decode_checkpoint, encode_checkpoint};
use spalmtl::optim::{Moments, OptimizerConfig, OptimizerState};
use spalmtl::synth::{gen_synthetic_suite, GeneratorSpec, SplitSizes};
use spalmtl::backbone::BackboneConfig;
use spalmtl::model::{ModelConfig, MtlModel};
use spalmtl::param::ParamId;
use spalmtl::tasks::vocab::CLS_ID;
use spalmtl::tasks::{make_batch, task_loss_sum, Label, Metric, TaskData, TaskExample, TaskKind, TaskSpec};
use spalmtl::Tensor;

type Mat = Vec<Vec<f64>>;

struct Weights<'a>(&'a MtlModel);

impl Weights<'_> {
    fn get(&self, name: &str) -> &Tensor {
        &self.0.store.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).value
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.get(name).data().to_vec()
    }

    fn scalar(&self, name: &str) -> f64 {
        self.get(name).data()[0]
    }

    /// `x · W (+ b)` for a row-major `in × out` weight.
    fn linear(&self, x: &Mat, prefix: &str, bias: bool) -> Mat {
        let w = self.get(&format!("{prefix}.weight"));
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        let b = bias.then(|| self.vec(&format!("{prefix}.bias")));
        x.iter()
            .map(|row| {
                assert_eq!(row.len(), n_in);
                (0..n_out)
                    .map(|o| {
                        let mut s = b.as_ref().map_or(0.0, |b| b[o]);
                        for i in 0..n_in {
                            s += row[i] * w.data()[i * n_out + o];
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    fn layer_norm(&self, x: &Mat, prefix: &str) -> Mat {
        let g = self.vec(&format!("{prefix}.gain"));
        let b = self.vec(&format!("{prefix}.bias"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let sd = (var + 1e-12).sqrt();
                row.iter().enumerate().map(|(c, v)| (v - mean) / sd * g[c] + b[c]).collect()
            })
            .collect()
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// Multi-head softmax attention over one sequence, no masking.
fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let (n, h) = (q.len(), q[0].len());
    let dk = h / heads;
    let mut out = vec![vec![0.0; h]; n];
    for head in 0..heads {
        let cols = head * dk..(head + 1) * dk;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                for c in cols.clone() {
                    out[i][c] += e[j] / z * v[j][c];
                }
            }
        }
    }
    out
}

/// Hidden states after every encoder layer for `[CLS] + tokens`.
pub fn scalar_encode(model: &MtlModel, tokens: &[usize]) -> Vec<Mat> {
    let w = Weights(model);
    let cfg = &model.config.backbone;
    let ids: Vec<usize> = std::iter::once(CLS_ID).chain(tokens.iter().copied()).collect();
    let tok = w.get("embeddings.token");
    let pos = w.get("embeddings.position");
    let d = cfg.model_dim;
    let emb: Mat = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (0..d).map(|c| tok.data()[id * d + c] + pos.data()[i * d + c]).collect())
        .collect();
    let mut x = w.layer_norm(&emb, "embeddings.norm");
    let mut outs = Vec::new();
    for l in 0..cfg.num_layers {
        let p = format!("layer{l}");
        let q = w.linear(&x, &format!("{p}.attn.query"), true);
        let k = w.linear(&x, &format!("{p}.attn.key"), true);
        let v = w.linear(&x, &format!("{p}.attn.value"), true);
        let a = w.linear(&attention(&q, &k, &v, cfg.num_heads), &format!("{p}.attn.output"), true);
        let h = w.layer_norm(&add(&a, &x), &format!("{p}.attn.norm"));
        let f: Mat = w
            .linear(&h, &format!("{p}.ff.in"), true)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let f = w.linear(&f, &format!("{p}.ff.out"), true);
        let frozen = w.layer_norm(&add(&f, &h), &format!("{p}.ff.norm"));
        x = match &model.config.spal {
            None => frozen,
            Some(s) => {
                let sp = format!("spal{l}");
                let z = w.linear(&x, &format!("{sp}.down"), false);
                let q = w.linear(&z, &format!("{sp}.query"), false);
                let k = w.linear(&z, &format!("{sp}.key"), false);
                let v = w.linear(&z, &format!("{sp}.value"), false);
                let a = w.linear(&attention(&q, &k, &v, s.num_heads), &format!("{sp}.output"), false);
                let side = w.linear(&a, &format!("{sp}.up"), false);
                if model.config.probe {
                    let (a, b) = (w.scalar(&format!("probe{l}.a")), w.scalar(&format!("probe{l}.b")));
                    let wt = a.exp() / (a.exp() + b.exp());
                    frozen
                        .iter()
                        .zip(&side)
                        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| wt * x + (1.0 - wt) * y).collect())
                        .collect()
                } else {
                    add(&frozen, &side)
                }
            }
        };
        outs.push(x.clone());
    }
    outs
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Task mean of per-example token-mean vectors at `layer`.
pub fn scalar_task_mean(model: &MtlModel, examples: &[TaskExample], layer: usize) -> Vec<f64> {
    let d = model.config.backbone.model_dim;
    let mut acc = vec![0.0; d];
    for e in examples {
        let h = &scalar_encode(model, &e.tokens)[layer];
        for row in h {
            for c in 0..d {
                acc[c] += row[c] / h.len() as f64;
            }
        }
    }
    acc.iter().map(|a| a / examples.len() as f64).collect()
}

/// Mean cosine over every unordered pair of tasks, pairs listed explicitly.
pub fn brute_force_generalization(model: &MtlModel, tasks: &[Vec<TaskExample>], layer: usize) -> f64 {
    let means: Vec<Vec<f64>> = tasks.iter().map(|t| scalar_task_mean(model, t, layer)).collect();
    let mut pairs = Vec::new();
    for i in 0..means.len() {
        for j in 0..means.len() {
            if i < j {
                pairs.push((i, j));
            }
        }
    }
    assert_eq!(pairs.len(), tasks.len() * (tasks.len() - 1) / 2);
    pairs.iter().map(|&(i, j)| cosine(&means[i], &means[j])).sum::<f64>() / pairs.len() as f64
}

/// Summed loss and scored count of `examples` through the model's own forward.
pub fn loss_sum(model: &MtlModel, spec: &TaskSpec, examples: &[TaskExample]) -> (f64, usize) {
    let refs: Vec<&TaskExample> = examples.iter().collect();
    let (batch, labels) = make_batch(&refs, &spec.kind, model.config.backbone.max_seq_len).unwrap();
    let mut tape = Tape::new();
    let (_, preds) = model.forward_task(&mut tape, &spec.id, &batch).unwrap();
    let (loss, n) = task_loss_sum(&mut tape, &spec.kind, preds, &labels).unwrap();
    (tape.value(loss).data()[0], n)
}

pub fn mean_loss(model: &MtlModel, spec: &TaskSpec, examples: &[TaskExample]) -> f64 {
    let (s, n) = loss_sum(model, spec, examples);
    s / n as f64
}

pub const FD_EPS: f64 = 1e-3;

/// Five-point central difference of `f` with respect to element `i` of
/// parameter `id`; truncation error is O(eps⁴).
pub fn central_difference(model: &mut MtlModel, id: ParamId, i: usize, eps: f64, f: &dyn Fn(&MtlModel) -> f64) -> f64 {
    let orig = model.store.value(id).data()[i];
    let mut at = |x: f64| {
        model.store.get_mut(id).value.data_mut()[i] = x;
        f(model)
    };
    let (p1, m1, p2, m2) = (at(orig + eps), at(orig - eps), at(orig + 2.0 * eps), at(orig - 2.0 * eps));
    model.store.get_mut(id).value.data_mut()[i] = orig;
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps)
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Replaces every parameter with draws from `N(0, std²)`-like uniform noise
/// so no gradient is trivially zero.
pub fn randomize(model: &mut MtlModel, std: f64, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let half = std * 3f64.sqrt();
        for v in model.store.get_mut(id).value.data_mut() {
            *v = r.gen_range(-half..half);
        }
    }
}

pub fn tiny_backbone(layers: usize, dim: usize, heads: usize, vocab: usize) -> BackboneConfig {
    BackboneConfig {
        num_layers: layers,
        model_dim: dim,
        num_heads: heads,
        ff_dim: 2 * dim,
        vocab_size: vocab,
        max_seq_len: 16,
        padding_token_id: 0,
    }
}

pub fn spec_for(id: &str, kind: TaskKind) -> TaskSpec {
    let metric = match kind {
        TaskKind::SeqRegression => Metric::Rmse,
        TaskKind::SeqClassification { .. } => Metric::Accuracy,
        TaskKind::TokenClassification { .. } => Metric::TokenAccuracy,
    };
    TaskSpec::new(id, kind, metric)
}

/// Random examples of varying length with labels valid for `kind`.
pub fn random_examples(kind: &TaskKind, n: usize, vocab: usize, len: (usize, usize), seed: u64) -> Vec<TaskExample> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let l = r.gen_range(len.0..=len.1);
            let tokens: Vec<usize> = (0..l).map(|_| r.gen_range(5..vocab)).collect();
            let label = match kind {
                TaskKind::SeqRegression => Label::Score(r.gen_range(-1.0..1.0)),
                TaskKind::SeqClassification { num_classes } => Label::Class(r.gen_range(0..*num_classes)),
                TaskKind::TokenClassification { .. } => {
                    let tags = kind.tag_names().len();
                    Label::Tags((0..l).map(|_| r.gen_range(0..tags)).collect())
                }
            };
            TaskExample {
                tokens,
                label,
                latent: None,
            }
        })
        .collect()
}

pub fn model_with_heads(config: ModelConfig, specs: &[&TaskSpec]) -> MtlModel {
    let cfg = specs
        .iter()
        .fold(config, |c, s| c.with_head(s.id.clone(), s.kind.clone()));
    MtlModel::new(cfg).unwrap()
}

pub fn kind_of(i: usize) -> TaskKind {
    match i % 3 {
        0 => TaskKind::SeqRegression,
        1 => TaskKind::SeqClassification { num_classes: 2 + i % 4 },
        _ => TaskKind::TokenClassification {
            entity_labels: vec!["P".into(), "Q".into()],
        },
    }
}

pub fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1e3..1e3) * r.gen::<f64>().powi(8)).collect()).unwrap()
}

/// A random small model, sometimes with optimizer state and a payload.
pub fn random_model(seed: u64) -> (MtlModel, Option<OptimizerState>, Option<String>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let layers = r.gen_range(1..=2);
    let spal = [None, Some(2), Some(4)][r.gen_range(0..3)];
    let mut cfg = ModelConfig::new(tiny_backbone(layers, 4, 2, 12), spal, r.gen());
    cfg.backbone_seed = r.gen();
    cfg.probe = spal.is_some() && r.gen();
    let specs: Vec<TaskSpec> = (0..r.gen_range(0..=3)).map(|i| spec_for(&format!("T{i}"), kind_of(r.gen_range(0..6)))).collect();
    let mut model = model_with_heads(cfg, &specs.iter().collect::<Vec<_>>());
    let keep_backbone = r.gen::<bool>();
    let backbone = model.backbone.param_ids();
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        if keep_backbone && backbone.contains(&id) {
            continue;
        }
        let shape = model.store.value(id).shape().to_vec();
        model.store.get_mut(id).value = random_tensor(&shape, &mut r);
    }
    model.backbone_pristine = keep_backbone;
    model.set_backbone_trainable(r.gen());
    for &id in &ids {
        if !backbone.contains(&id) && r.gen_bool(0.2) {
            model.store.get_mut(id).trainable = false;
        }
    }
    let optimizer = r.gen::<bool>().then(|| {
        let mut s = OptimizerState::new(
            OptimizerConfig {
                base_lr: r.gen(),
                warmup_steps: r.gen_range(0..100),
                ..OptimizerConfig::default()
            },
            r.gen_range(100..1000),
        );
        s.step = r.gen_range(0..100);
        s.moments = ids
            .iter()
            .map(|&id| {
                r.gen::<bool>().then(|| {
                    let shape = model.store.value(id).shape().to_vec();
                    Moments {
                        first: random_tensor(&shape, &mut r),
                        second: random_tensor(&shape, &mut r).map(f64::abs),
                        updates: r.gen_range(1..100),
                    }
                })
            })
            .collect();
        s
    });
    let extra = r.gen::<bool>().then(|| format!("{{\"note\": \"seed {seed} ✓\"}}"));
    (model, optimizer, extra)
}

pub fn assert_models_bit_equal(a: &MtlModel, b: &MtlModel) {
    assert_eq!(a.config, b.config);
    assert_eq!(a.backbone_pristine, b.backbone_pristine);
    assert_eq!(a.store.len(), b.store.len());
    for ((ia, pa), (ib, pb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(ia, ib);
        assert_eq!(pa.name, pb.name);
        assert_eq!(pa.group, pb.group);
        assert_eq!(pa.trainable, pb.trainable, "{}", pa.name);
        assert!(pa.value.bit_eq(&pb.value), "{}", pa.name);
    }
}

pub fn assert_optimizers_bit_equal(a: &OptimizerState, b: &OptimizerState) {
    assert_eq!(a.config, b.config);
    assert_eq!((a.step, a.total_steps), (b.step, b.total_steps));
    assert_eq!(a.moments.len(), b.moments.len());
    for (x, y) in a.moments.iter().zip(&b.moments) {
        match (x, y) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                assert_eq!(x.updates, y.updates);
                assert!(x.first.bit_eq(&y.first) && x.second.bit_eq(&y.second));
            }
            _ => panic!("moment presence differs"),
        }
    }
}

pub fn resume_suite() -> Vec<(TaskSpec, TaskData)> {
    let mut g = GeneratorSpec::findata_like(100, 0.5, 4);
    g.tasks.truncate(3);
    for t in &mut g.tasks {
        t.sizes = SplitSizes {
            train: 20,
            dev: 6,
            test: 6,
        };
        t.task.batch_size = 4;
    }
    gen_synthetic_suite(&g).unwrap().datasets().unwrap()
}

/// Interrupts a short MTL run at each cut, round-trips it through a
/// checkpoint, and requires the resumed run to match an uninterrupted one.
pub fn assert_resume_is_seamless(cuts: &[u64]) {
    let tasks = resume_suite();
    let mut cfg = ModelConfig::new(tiny_backbone(2, 8, 2, 100), Some(4), 6);
    cfg.probe = true;
    let specs: Vec<&TaskSpec> = tasks.iter().map(|(s, _)| s).collect();
    let model = model_with_heads(cfg, &specs);
    let mut plan = TrainPlan::new(Mode::Mtl, 6);
    plan.eval_interval = 5;
    plan.max_steps = Some(40);
    plan.temperature = 2.0;
    plan.optimizer.base_lr = 1e-2;
    plan.optimizer.warmup_steps = 4;
    plan.analysis.rep_gen = true;
    plan.analysis.grad_snapshots = true;
    plan.analysis.snapshot_interval = 10;

    let full = Trainer::new(plan.clone(), model.clone(), &tasks).unwrap().finish().unwrap();

    for &cut in cuts {
        let mut first = Trainer::new(plan.clone(), model.clone(), &tasks).unwrap();
        first.run_until(cut).unwrap();
        let state = serde_json::to_string(&first.state()).unwrap();
        let bytes = encode_checkpoint(first.model(), Some(first.optimizer()), Some(&state)).unwrap();
        drop(first);
        let ckpt = decode_checkpoint(&bytes).unwrap();
        let state: TrainerState = serde_json::from_str(ckpt.extra.as_deref().unwrap()).unwrap();
        let resumed = Trainer::resume(plan.clone(), ckpt.model, ckpt.optimizer.unwrap(), &tasks, state)
            .unwrap()
            .finish()
            .unwrap();
        assert_eq!(resumed.record, full.record, "cut at {cut}");
        assert_eq!(resumed.artifacts, full.artifacts, "cut at {cut}");
        assert_models_bit_equal(&resumed.model, &full.model);
    }
}

