//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPAL" | u32 version | u64 header_len | header JSON | [32] sha256(header JSON)
//! u64 n_params | n × (u32 name_len | name | u8 trainable | tensor)
//! u8 has_optimizer | [u64 step | u64 total_steps | u64 config_len | config JSON
//!                     | u64 n | n × (u8 present | [u64 updates | tensor | tensor])]
//! u64 extra_len | extra (UTF-8, empty when absent)
//! [32] sha256(everything above)
//! ```
//!
//! A tensor is `u32 ndim | ndim × u64 dim | f64 values`. When the backbone is
//! frozen and still at its seeded initialization it is omitted and rebuilt
//! from the model config on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, MtlModel};
use crate::optim::{Moments, OptimizerConfig, OptimizerState};
use crate::param::ParamGroup;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SPAL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    backbone_pristine: bool,
    backbone_included: bool,
}

/// Contents of a loaded checkpoint.
pub struct Checkpoint {
    pub model: MtlModel,
    pub optimizer: Option<OptimizerState>,
    /// Caller-defined payload, e.g. serialized trainer state.
    pub extra: Option<String>,
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(model: &MtlModel, optimizer: Option<&OptimizerState>, extra: Option<&str>) -> Result<Vec<u8>> {
    let include_backbone = !(model.backbone_frozen() && model.backbone_pristine);
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        backbone_pristine: model.backbone_pristine,
        backbone_included: include_backbone,
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_bytes(&mut buf, &header);
    buf.extend_from_slice(&Sha256::digest(&header));

    let params: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| include_backbone || p.group != ParamGroup::Backbone)
        .collect();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (_, p) in params {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.trainable as u8);
        put_tensor(&mut buf, &p.value);
    }

    match optimizer {
        None => buf.push(0),
        Some(o) => {
            buf.push(1);
            buf.extend_from_slice(&o.step.to_le_bytes());
            buf.extend_from_slice(&o.total_steps.to_le_bytes());
            put_bytes(&mut buf, &serde_json::to_vec(&o.config)?);
            buf.extend_from_slice(&(o.moments.len() as u64).to_le_bytes());
            for m in &o.moments {
                match m {
                    None => buf.push(0),
                    Some(m) => {
                        buf.push(1);
                        buf.extend_from_slice(&m.updates.to_le_bytes());
                        put_tensor(&mut buf, &m.first);
                        put_tensor(&mut buf, &m.second);
                    }
                }
            }
        }
    }
    put_bytes(&mut buf, extra.unwrap_or("").as_bytes());
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, model: &MtlModel, optimizer: Option<&OptimizerState>, extra: Option<&str>) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, extra)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64(what)?).map_err(|_| CheckpointError::Truncated(what))
    }

    fn bytes(&mut self, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let n = self.len(what)?;
        self.take(n, what)
    }

    fn flag(&mut self, what: &'static str) -> Result<bool, CheckpointError> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(CheckpointError::Malformed(format!("flag byte {b} in {what}"))),
        }
    }

    fn tensor(&mut self, what: &'static str) -> Result<Tensor, CheckpointError> {
        let ndim = self.u32(what)? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(self.len(what)?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor shape {shape:?} overflows")))?;
        let raw = self.take(n, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    CheckpointError::Malformed(msg.into()).into()
}

/// Parses a checkpoint. Magic and version are checked before anything else.
pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let header_bytes = r.bytes("header")?;
    let header_digest = r.take(32, "header digest")?;
    if Sha256::digest(header_bytes).as_slice() != header_digest {
        return Err(CheckpointError::DigestMismatch("config header").into());
    }
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| malformed(format!("config header: {e}")))?;

    let mut stored = Vec::new();
    for _ in 0..r.len("parameter count")? {
        let name_len = r.u32("parameter name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| malformed("parameter name is not UTF-8"))?
            .to_string();
        let trainable = r.flag("freeze flag")?;
        let value = r.tensor("parameter tensor")?;
        stored.push((name, trainable, value));
    }

    let optimizer = if r.flag("optimizer flag")? {
        let step = r.u64("optimizer step")?;
        let total_steps = r.u64("optimizer step")?;
        let config: OptimizerConfig = serde_json::from_slice(r.bytes("optimizer config")?)
            .map_err(|e| malformed(format!("optimizer config: {e}")))?;
        let mut moments = Vec::new();
        for _ in 0..r.len("optimizer moments")? {
            moments.push(if r.flag("optimizer moments")? {
                Some(Moments {
                    updates: r.u64("optimizer moments")?,
                    first: r.tensor("optimizer moments")?,
                    second: r.tensor("optimizer moments")?,
                })
            } else {
                None
            });
        }
        Some(OptimizerState {
            config,
            total_steps,
            step,
            moments,
        })
    } else {
        None
    };
    let extra = std::str::from_utf8(r.bytes("extra payload")?)
        .map_err(|_| malformed("extra payload is not UTF-8"))?
        .to_string();
    let body_end = r.pos;
    let digest = r.take(32, "payload digest")?;
    if r.pos != buf.len() {
        return Err(malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if Sha256::digest(&buf[..body_end]).as_slice() != digest {
        return Err(CheckpointError::DigestMismatch("payload").into());
    }

    let mut model = MtlModel::new(header.model).map_err(|e| malformed(format!("model config: {e}")))?;
    let expected = model
        .store
        .iter()
        .filter(|(_, p)| header.backbone_included || p.group != ParamGroup::Backbone)
        .count();
    if stored.len() != expected {
        return Err(malformed(format!("{} parameters stored, expected {expected}", stored.len())));
    }
    if !header.backbone_included {
        model.set_backbone_trainable(false);
    }
    for (name, trainable, value) in stored {
        let id = model
            .store
            .id_of(&name)
            .ok_or_else(|| malformed(format!("unknown parameter `{name}`")))?;
        if !header.backbone_included && model.store.get(id).group == ParamGroup::Backbone {
            return Err(malformed(format!("parameter `{name}` should have been omitted")));
        }
        model.store.set_value(id, value).map_err(|e| malformed(e.to_string()))?;
        model.store.get_mut(id).trainable = trainable;
    }
    model.backbone_pristine = header.backbone_pristine;
    if let Some(o) = &optimizer {
        if o.moments.len() > model.store.len() {
            return Err(malformed("more optimizer moments than parameters"));
        }
        for (i, m) in o.moments.iter().enumerate() {
            if let Some(m) = m {
                let shape = model.store.get(crate::param::ParamId(i)).value.shape();
                if m.first.shape() != shape || m.second.shape() != shape {
                    return Err(malformed(format!("optimizer moment {i} has the wrong shape")));
                }
            }
        }
    }
    Ok(Checkpoint {
        model,
        optimizer,
        extra: (!extra.is_empty()).then_some(extra),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::tasks::TaskKind;

    fn model(frozen: bool) -> MtlModel {
        let bb = BackboneConfig {
            num_layers: 1,
            model_dim: 4,
            num_heads: 2,
            ff_dim: 8,
            vocab_size: 12,
            max_seq_len: 6,
            padding_token_id: 0,
        };
        let cfg = ModelConfig::new(bb, Some(2), 9).with_head("A", TaskKind::SeqClassification { num_classes: 2 });
        let mut m = MtlModel::new(cfg).unwrap();
        m.set_backbone_trainable(!frozen);
        m
    }

    fn assert_same(a: &MtlModel, b: &MtlModel) {
        assert_eq!(a.config, b.config);
        assert_eq!(a.store.len(), b.store.len());
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.trainable, q.trainable);
            assert!(p.value.bit_eq(&q.value), "{}", p.name);
        }
    }

    #[test]
    fn round_trip_with_and_without_backbone() {
        for frozen in [true, false] {
            let mut m = model(frozen);
            m.backbone_pristine = frozen;
            let bytes = encode_checkpoint(&m, None, Some("{}")).unwrap();
            let c = decode_checkpoint(&bytes).unwrap();
            assert_same(&m, &c.model);
            assert_eq!(c.extra.as_deref(), Some("{}"));
            assert!(c.optimizer.is_none());
        }
        let full = encode_checkpoint(&model(false), None, None).unwrap().len();
        let mut frozen = model(true);
        frozen.backbone_pristine = true;
        assert!(encode_checkpoint(&frozen, None, None).unwrap().len() < full);
    }

    #[test]
    fn distinct_error_codes() {
        let good = encode_checkpoint(&model(false), None, None).unwrap();
        let code = |bytes: &[u8]| match decode_checkpoint(bytes) {
            Err(Error::Checkpoint(e)) => e.code(),
            other => panic!("expected a checkpoint error, got {:?}", other.map(|_| ())),
        };
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(code(&bad), 1);
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(code(&bad), 2);
        let mut bad = good.clone();
        // Inside the last head-bias value.
        let at = bad.len() - 45;
        bad[at] ^= 1;
        assert_eq!(code(&bad), 3);
        assert_eq!(code(&good[..good.len() - 100]), 4);
        assert_eq!(code(&good[..good.len() - 5]), 4);
    }
}
