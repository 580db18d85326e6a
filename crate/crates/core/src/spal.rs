//! Shared parallel attention layers.
//!
//! One low-dimensional attention branch runs beside each backbone layer:
//! the layer input is projected down to the SPAL width, passed through
//! multi-head self-attention, and projected back up. The branch output is
//! added to the backbone layer's output. A single stack serves every task.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionLayout, Tape, Var};
use crate::backbone::{BackboneConfig, Linear, INIT_STD};
use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::seeding::{normal_tensor, rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpalConfig {
    pub hidden_size: usize,
    pub num_heads: usize,
}

impl SpalConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.hidden_size == 0 {
            return Err(Error::config("hidden_size", "must be positive"));
        }
        if self.num_heads != backbone.num_heads {
            return Err(Error::config(
                "num_heads",
                format!(
                    "SPAL heads ({}) must equal backbone heads ({})",
                    self.num_heads, backbone.num_heads
                ),
            ));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::config(
                "hidden_size",
                format!("{} is not a multiple of {} heads", self.hidden_size, self.num_heads),
            ));
        }
        Ok(())
    }
}

/// Bias-free projections of one SPAL.
#[derive(Debug, Clone)]
pub struct SpalLayer {
    pub down: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub up: Linear,
}

impl SpalLayer {
    pub fn param_ids(&self) -> [ParamId; 6] {
        [
            self.down.weight,
            self.query.weight,
            self.key.weight,
            self.value.weight,
            self.output.weight,
            self.up.weight,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct SpalStack {
    pub config: SpalConfig,
    pub layers: Vec<SpalLayer>,
}

/// `L × (4h² + 2hd)`: four attention projections plus the down/up pair per layer.
pub fn count_spal_params(config: &SpalConfig, backbone: &BackboneConfig) -> usize {
    let (h, d) = (config.hidden_size, backbone.model_dim);
    backbone.num_layers * (4 * h * h + 2 * h * d)
}

/// SPAL parameters as a fraction of the backbone's parameter count.
pub fn capacity_fraction(config: &SpalConfig, backbone: &BackboneConfig) -> f64 {
    count_spal_params(config, backbone) as f64 / backbone.param_count() as f64
}

/// Creates one SPAL per backbone layer. Projections are drawn from a scaled
/// normal; the up-projection starts at zero so the stack is initially inert.
pub fn attach_spals(
    backbone: &BackboneConfig,
    config: &SpalConfig,
    seed: u64,
    store: &mut ParamStore,
) -> Result<SpalStack> {
    config.validate(backbone)?;
    let mut r = rng(seed, 0x5ba1);
    let (h, d) = (config.hidden_size, backbone.model_dim);
    let g = ParamGroup::Spal;
    let mut layers = Vec::with_capacity(backbone.num_layers);
    for l in 0..backbone.num_layers {
        let p = format!("spal{l}");
        let mut lin = |store: &mut ParamStore, name: &str, i: usize, o: usize, zero: bool| {
            let w = if zero {
                Tensor::zeros(&[i, o])
            } else {
                normal_tensor(&[i, o], INIT_STD, &mut r)
            };
            Linear::new(store, &format!("{p}.{name}"), g.clone(), i, o, false, w)
        };
        let down = lin(store, "down", d, h, false)?;
        let query = lin(store, "query", h, h, false)?;
        let key = lin(store, "key", h, h, false)?;
        let value = lin(store, "value", h, h, false)?;
        let output = lin(store, "output", h, h, false)?;
        let up = lin(store, "up", h, d, true)?;
        layers.push(SpalLayer {
            down,
            query,
            key,
            value,
            output,
            up,
        });
    }
    Ok(SpalStack {
        config: *config,
        layers,
    })
}

/// `up(attention(down(x)))` over a flattened `(batch*seq) × d` input.
pub fn spal_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &SpalLayer,
    x: Var,
    layout: &AttentionLayout,
) -> Result<Var> {
    let (_, d) = tape.value(x).dims2()?;
    let expected = store.value(layer.down.weight).shape()[0];
    if d != expected {
        return Err(Error::Shape(format!(
            "SPAL expects width {expected}, input is {:?}",
            tape.value(x).shape()
        )));
    }
    let z = layer.down.forward(tape, store, x)?;
    let q = layer.query.forward(tape, store, z)?;
    let k = layer.key.forward(tape, store, z)?;
    let v = layer.value.forward(tape, store, z)?;
    let a = tape.attention(q, k, v, layout.clone())?;
    let a = layer.output.forward(tape, store, a)?;
    layer.up.forward(tape, store, a)
}

impl SpalStack {
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(SpalLayer::param_ids).collect()
    }

    /// Sets every SPAL parameter to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn replica(h: usize) -> (SpalConfig, BackboneConfig) {
        (SpalConfig { hidden_size: h, num_heads: 12 }, BackboneConfig::bert_base())
    }

    #[test]
    fn replica_counts() {
        let (c, b) = replica(12);
        assert_eq!(count_spal_params(&c, &b), 228_096);
        let (c, b) = replica(204);
        assert_eq!(count_spal_params(&c, &b), 5_757_696);
        let (c, b) = replica(816);
        assert_eq!(count_spal_params(&c, &b), 47_001_600);
    }

    #[test]
    fn replica_fractions() {
        let (c, b) = replica(12);
        assert!((capacity_fraction(&c, &b) - 0.002).abs() < 0.0005);
        let (c, b) = replica(816);
        let f = capacity_fraction(&c, &b);
        assert!((0.422..=0.432).contains(&f), "{f}");
    }

    #[test]
    fn rejects_indivisible_hidden_size() {
        let b = BackboneConfig::toy();
        let mut store = ParamStore::new();
        let c = SpalConfig { hidden_size: 10, num_heads: 4 };
        assert!(matches!(attach_spals(&b, &c, 0, &mut store), Err(Error::Config { .. })));
        let c = SpalConfig { hidden_size: 12, num_heads: 3 };
        assert!(attach_spals(&b, &c, 0, &mut store).is_err());
    }

    #[test]
    fn attached_tensors_match_count() {
        let b = BackboneConfig::toy();
        for h in [4, 12, 36] {
            let mut store = ParamStore::new();
            let c = SpalConfig { hidden_size: h, num_heads: 4 };
            let stack = attach_spals(&b, &c, 7, &mut store).unwrap();
            assert_eq!(stack.layers.len(), b.num_layers);
            let total: usize = store.iter().map(|(_, p)| p.value.len()).sum();
            assert_eq!(total, count_spal_params(&c, &b));
            assert!(store.iter().all(|(_, p)| p.trainable));
        }
    }
}
