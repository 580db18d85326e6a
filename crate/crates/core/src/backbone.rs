//! Post-norm transformer encoder used as the shared backbone.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::seeding::{normal_tensor, rng};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub padding_token_id: usize,
}

impl BackboneConfig {
    /// Two-layer desk-scale encoder.
    pub fn toy() -> Self {
        Self {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ff_dim: 256,
            vocab_size: 1000,
            max_seq_len: 128,
            padding_token_id: 0,
        }
    }

    /// BERT-base dimensions (12 layers, width 768, 12 heads, 30,522-token vocabulary).
    pub fn bert_base() -> Self {
        Self {
            num_layers: 12,
            model_dim: 768,
            num_heads: 12,
            ff_dim: 3072,
            vocab_size: 30_522,
            max_seq_len: 512,
            padding_token_id: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(
                "model_dim",
                format!("{} is not divisible by num_heads = {}", self.model_dim, self.num_heads),
            ));
        }
        if self.padding_token_id >= self.vocab_size {
            return Err(Error::config("padding_token_id", "must be inside the vocabulary"));
        }
        Ok(())
    }

    /// Closed-form number of backbone parameters.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.model_dim, self.ff_dim);
        let embeddings = self.vocab_size * d + self.max_seq_len * d + 2 * d;
        let attention = 4 * (d * d + d) + 2 * d;
        let feed_forward = d * f + f + f * d + d + 2 * d;
        embeddings + self.num_layers * (attention + feed_forward)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        weight: Tensor,
    ) -> Result<Self> {
        debug_assert_eq!(weight.shape(), [fan_in, fan_out]);
        let weight = store.insert(format!("{name}.weight"), group.clone(), weight)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), group, Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert(format!("{name}.gain"), ParamGroup::Backbone, Tensor::ones(&[dim]))?,
            bias: store.insert(format!("{name}.bias"), ParamGroup::Backbone, Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
}

impl EncoderLayer {
    /// attention → add & norm → feed-forward → add & norm.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, layout: &AttentionLayout) -> Result<Var> {
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let attn = tape.attention(q, k, v, layout.clone())?;
        let attn = self.output.forward(tape, store, attn)?;
        let res = tape.add(attn, x)?;
        let h = self.attn_norm.forward(tape, store, res)?;
        let f = self.ff_in.forward(tape, store, h)?;
        let f = tape.gelu(f);
        let f = self.ff_out.forward(tape, store, f)?;
        let res = tape.add(f, h)?;
        self.ff_norm.forward(tape, store, res)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub embedding_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
}

/// A padded batch of token sequences, flattened row-major as `batch × seq`.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub token_ids: Vec<usize>,
    /// True for real tokens, false for padding.
    pub mask: Arc<Vec<bool>>,
}

impl TokenBatch {
    /// Pads `sequences` to the longest one with `pad_id`.
    pub fn from_sequences(sequences: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let seq = sequences.iter().map(Vec::len).max().unwrap_or(0);
        if seq == 0 {
            return Err(Error::Data("every sequence in the batch is empty".into()));
        }
        let mut token_ids = Vec::with_capacity(sequences.len() * seq);
        let mut mask = Vec::with_capacity(sequences.len() * seq);
        for s in sequences {
            token_ids.extend_from_slice(s);
            mask.extend(std::iter::repeat(true).take(s.len()));
            token_ids.extend(std::iter::repeat(pad_id).take(seq - s.len()));
            mask.extend(std::iter::repeat(false).take(seq - s.len()));
        }
        Ok(Self {
            batch: sequences.len(),
            seq,
            token_ids,
            mask: Arc::new(mask),
        })
    }

    pub fn with_mask(batch: usize, seq: usize, token_ids: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if token_ids.len() != batch * seq || mask.len() != batch * seq {
            return Err(Error::Shape(format!(
                "batch {batch}x{seq} needs {} ids and mask flags",
                batch * seq
            )));
        }
        Ok(Self {
            batch,
            seq,
            token_ids,
            mask: Arc::new(mask),
        })
    }

    pub fn layout(&self, heads: usize) -> AttentionLayout {
        AttentionLayout {
            batch: self.batch,
            seq: self.seq,
            heads,
            mask: Arc::clone(&self.mask),
        }
    }

    pub fn real_len(&self, b: usize) -> usize {
        self.mask[b * self.seq..(b + 1) * self.seq].iter().filter(|&&m| m).count()
    }
}

pub fn init_backbone(config: &BackboneConfig, seed: u64, store: &mut ParamStore) -> Result<Backbone> {
    config.validate()?;
    let mut r = rng(seed, 0x00ba_c4b0);
    let (d, f) = (config.model_dim, config.ff_dim);
    let g = ParamGroup::Backbone;
    let token_embedding = store.insert(
        "embeddings.token",
        g.clone(),
        normal_tensor(&[config.vocab_size, d], INIT_STD, &mut r),
    )?;
    let position_embedding = store.insert(
        "embeddings.position",
        g.clone(),
        normal_tensor(&[config.max_seq_len, d], INIT_STD, &mut r),
    )?;
    let embedding_norm = LayerNorm::new(store, "embeddings.norm", d)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let p = format!("layer{l}");
        let mut lin = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
            let w = normal_tensor(&[i, o], INIT_STD, &mut r);
            Linear::new(store, &format!("{p}.{name}"), g.clone(), i, o, true, w)
        };
        let query = lin(store, "attn.query", d, d)?;
        let key = lin(store, "attn.key", d, d)?;
        let value = lin(store, "attn.value", d, d)?;
        let output = lin(store, "attn.output", d, d)?;
        let ff_in = lin(store, "ff.in", d, f)?;
        let ff_out = lin(store, "ff.out", f, d)?;
        layers.push(EncoderLayer {
            query,
            key,
            value,
            output,
            attn_norm: LayerNorm::new(store, &format!("{p}.attn.norm"), d)?,
            ff_in,
            ff_out,
            ff_norm: LayerNorm::new(store, &format!("{p}.ff.norm"), d)?,
        });
    }
    Ok(Backbone {
        config: *config,
        token_embedding,
        position_embedding,
        embedding_norm,
        layers,
    })
}

/// Sets the trainable flag of every backbone parameter; heads and SPALs are untouched.
pub fn set_trainable(store: &mut ParamStore, trainable: bool) {
    store.set_group_trainable(|g| *g == ParamGroup::Backbone, trainable);
}

impl Backbone {
    pub fn validate_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq > self.config.max_seq_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, self.config.max_seq_len
            )));
        }
        for (pos, (&id, &real)) in batch.token_ids.iter().zip(batch.mask.iter()).enumerate() {
            if real && id >= self.config.vocab_size {
                return Err(Error::Data(format!(
                    "token id {id} at sequence {} position {} is outside the vocabulary of {}",
                    pos / batch.seq,
                    pos % batch.seq,
                    self.config.vocab_size
                )));
            }
        }
        for b in 0..batch.batch {
            if batch.real_len(b) == 0 {
                return Err(Error::Data(format!("sequence {b} is empty after padding")));
            }
        }
        Ok(())
    }

    /// Token plus position embeddings, normalized.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, batch: &TokenBatch) -> Result<Var> {
        let ids: Vec<usize> = batch
            .token_ids
            .iter()
            .zip(batch.mask.iter())
            .map(|(&id, &real)| if real { id } else { self.config.padding_token_id })
            .collect();
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let tok = tape.param(store, self.token_embedding);
        let pos = tape.param(store, self.position_embedding);
        let t = tape.gather_rows(tok, &ids)?;
        let p = tape.gather_rows(pos, &positions)?;
        let x = tape.add(t, p)?;
        self.embedding_norm.forward(tape, store, x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.token_embedding,
            self.position_embedding,
            self.embedding_norm.gain,
            self.embedding_norm.bias,
        ];
        for l in &self.layers {
            for lin in [&l.query, &l.key, &l.value, &l.output] {
                ids.extend(lin.params());
            }
            ids.extend([l.attn_norm.gain, l.attn_norm.bias]);
            ids.extend(l.ff_in.params());
            ids.extend(l.ff_out.params());
            ids.extend([l.ff_norm.gain, l.ff_norm.bias]);
        }
        ids
    }
}
