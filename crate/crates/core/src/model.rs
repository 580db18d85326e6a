//! The multi-task model: backbone, optional SPAL stack and probe, and one
//! head per task, all sharing a single [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_pair, Tape, Var};
use crate::backbone::{init_backbone, set_trainable, Backbone, BackboneConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::spal::{attach_spals, spal_forward, SpalConfig, SpalStack};
use crate::tasks::{head_forward, pool_first, Head, TaskKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub task_id: String,
    pub kind: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub backbone_seed: u64,
    pub spal: Option<SpalConfig>,
    pub spal_seed: u64,
    pub probe: bool,
    pub head_seed: u64,
    pub heads: Vec<HeadConfig>,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, spal_hidden: Option<usize>, seed: u64) -> Self {
        Self {
            backbone,
            backbone_seed: seed,
            spal: spal_hidden.map(|h| SpalConfig {
                hidden_size: h,
                num_heads: backbone.num_heads,
            }),
            spal_seed: seed,
            probe: false,
            head_seed: seed,
            heads: Vec::new(),
        }
    }

    pub fn with_head(mut self, task_id: impl Into<String>, kind: TaskKind) -> Self {
        self.heads.push(HeadConfig {
            task_id: task_id.into(),
            kind,
        });
        self
    }
}

/// Per-layer scalars `a`, `b` weighting the backbone branch against the SPAL
/// branch: `w·backbone + (1−w)·spal` with `(w, 1−w) = softmax(a, b)`.
#[derive(Debug, Clone)]
pub struct ProbeWeights {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl ProbeWeights {
    fn new(store: &mut ParamStore, num_layers: usize) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|l| {
                Ok((
                    store.insert(format!("probe{l}.a"), ParamGroup::Probe, Tensor::scalar(0.0))?,
                    store.insert(format!("probe{l}.b"), ParamGroup::Probe, Tensor::scalar(0.0))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Backbone-branch weight `w` of every layer.
    pub fn weights(&self, store: &ParamStore) -> Vec<f64> {
        self.layers
            .iter()
            .map(|&(a, b)| softmax_pair(store.value(a).data()[0], store.value(b).data()[0]).0)
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(a, b)| [a, b]).collect()
    }
}

/// Outputs of every encoder layer for one batch.
pub struct Encoding {
    pub layers: Vec<Var>,
    pub batch: TokenBatch,
}

impl Encoding {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("encoder has at least one layer")
    }

    /// Mean over real tokens of layer `layer`, one vector per sequence.
    pub fn mean_pooled(&self, tape: &Tape, layer: usize) -> Result<Vec<Vec<f64>>> {
        let out = tape.value(self.layers[layer]);
        let (_, d) = out.dims2()?;
        let b = &self.batch;
        Ok((0..b.batch)
            .map(|s| {
                let mut acc = vec![0.0; d];
                let mut n = 0usize;
                for i in 0..b.seq {
                    if b.mask[s * b.seq + i] {
                        for (a, x) in acc.iter_mut().zip(out.row(s * b.seq + i)) {
                            *a += x;
                        }
                        n += 1;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n as f64);
                acc
            })
            .collect())
    }
}

/// Runs the encoder. With SPALs attached each layer's output is
/// `layer(x) + spal(x)`, or the probe-weighted mix of the two.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    backbone: &Backbone,
    spals: Option<&SpalStack>,
    probe: Option<&ProbeWeights>,
    batch: &TokenBatch,
) -> Result<Encoding> {
    backbone.validate_batch(batch)?;
    if probe.is_some() && spals.is_none() {
        return Err(Error::config("probe", "probing requires a SPAL stack"));
    }
    let layout = batch.layout(backbone.config.num_heads);
    let mut x = backbone.embed(tape, store, batch)?;
    let mut layers = Vec::with_capacity(backbone.layers.len());
    for (l, layer) in backbone.layers.iter().enumerate() {
        let frozen = layer.forward(tape, store, x, &layout)?;
        x = match spals {
            Some(stack) => {
                let side = spal_forward(tape, store, &stack.layers[l], x, &layout)?;
                match probe {
                    Some(p) => {
                        let (a, b) = p.layers[l];
                        let a = tape.param(store, a);
                        let b = tape.param(store, b);
                        tape.mix(frozen, side, a, b)?
                    }
                    None => tape.add(frozen, side)?,
                }
            }
            None => frozen,
        };
        layers.push(x);
    }
    Ok(Encoding {
        layers,
        batch: batch.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct MtlModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub spals: Option<SpalStack>,
    pub probe: Option<ProbeWeights>,
    pub heads: Vec<Head>,
    /// False once the backbone has been updated or loaded from elsewhere, i.e.
    /// when it can no longer be regenerated from its seed.
    pub backbone_pristine: bool,
}

impl MtlModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = init_backbone(&config.backbone, config.backbone_seed, &mut store)?;
        let spals = match &config.spal {
            Some(s) => Some(attach_spals(&config.backbone, s, config.spal_seed, &mut store)?),
            None => None,
        };
        let probe = if config.probe {
            if spals.is_none() {
                return Err(Error::config("probe", "probing requires a SPAL stack"));
            }
            Some(ProbeWeights::new(&mut store, config.backbone.num_layers)?)
        } else {
            None
        };
        let mut model = Self {
            config: ModelConfig {
                heads: Vec::new(),
                ..config.clone()
            },
            store,
            backbone,
            spals,
            probe,
            heads: Vec::new(),
            backbone_pristine: true,
        };
        for h in &config.heads {
            model.add_head(&h.task_id, &h.kind)?;
        }
        Ok(model)
    }

    pub fn add_head(&mut self, task_id: &str, kind: &TaskKind) -> Result<()> {
        if self.head(task_id).is_some() {
            return Err(Error::config("heads", format!("duplicate head for task `{task_id}`")));
        }
        let head = Head::new(
            &mut self.store,
            task_id,
            kind,
            self.config.backbone.model_dim,
            self.config.head_seed,
        )?;
        self.heads.push(head);
        self.config.heads.push(HeadConfig {
            task_id: task_id.to_string(),
            kind: kind.clone(),
        });
        Ok(())
    }

    pub fn head(&self, task_id: &str) -> Option<&Head> {
        self.heads.iter().find(|h| h.task_id == task_id)
    }

    pub fn encode(&self, tape: &mut Tape, batch: &TokenBatch) -> Result<Encoding> {
        encode(
            tape,
            &self.store,
            &self.backbone,
            self.spals.as_ref(),
            self.probe.as_ref(),
            batch,
        )
    }

    /// Encoder plus the task's head; sequence kinds read the first position.
    pub fn forward_task(&self, tape: &mut Tape, task_id: &str, batch: &TokenBatch) -> Result<(Encoding, Var)> {
        let head = self
            .head(task_id)
            .ok_or_else(|| Error::Contract(format!("task `{task_id}` is not registered")))?;
        let enc = self.encode(tape, batch)?;
        let reps = if head.kind.is_token_level() {
            enc.last()
        } else {
            pool_first(tape, enc.last(), batch)?
        };
        let preds = head_forward(tape, &self.store, head, reps)?;
        Ok((enc, preds))
    }

    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        set_trainable(&mut self.store, trainable);
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone
            .param_ids()
            .iter()
            .all(|&id| !self.store.get(id).trainable)
    }

    /// Trainable parameters outside any head, in canonical order.
    pub fn shared_trainable(&self) -> Vec<ParamId> {
        self.store.shared_trainable()
    }

    /// Parameters updated by a step on `task_id`: the shared trunk plus that task's head.
    pub fn step_params(&self, task_id: &str) -> Result<Vec<ParamId>> {
        let head = self
            .head(task_id)
            .ok_or_else(|| Error::Contract(format!("task `{task_id}` is not registered")))?;
        let mut ids = self.shared_trainable();
        ids.extend(head.param_ids());
        Ok(ids)
    }

    /// Copy of the shared trunk with no heads.
    pub fn trunk(&self) -> Result<MtlModel> {
        let mut cfg = self.config.clone();
        cfg.heads.clear();
        let mut m = MtlModel::new(cfg)?;
        for (id, p) in self.store.iter() {
            if p.group.is_shared() {
                let dst = m.store.id_of(&p.name).expect("same trunk layout");
                debug_assert_eq!(dst, id);
                m.store.get_mut(dst).value = p.value.clone();
                m.store.get_mut(dst).trainable = p.trainable;
            }
        }
        m.backbone_pristine = self.backbone_pristine;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            vocab_size: 20,
            max_seq_len: 8,
            padding_token_id: 0,
        }
    }

    #[test]
    fn encode_shapes() {
        let m = MtlModel::new(ModelConfig::new(small(), Some(4), 1)).unwrap();
        let batch = TokenBatch::from_sequences(&[vec![1, 5, 6], vec![1, 7]], 0).unwrap();
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &batch).unwrap();
        assert_eq!(enc.layers.len(), 2);
        for &l in &enc.layers {
            assert_eq!(tape.value(l).shape(), [6, 8]);
        }
    }

    #[test]
    fn probe_without_spal_is_rejected() {
        let mut c = ModelConfig::new(small(), None, 1);
        c.probe = true;
        assert!(matches!(MtlModel::new(c), Err(Error::Config { .. })));
    }
}
