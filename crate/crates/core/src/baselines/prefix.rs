//! Prefix-tuning: `p` trainable key/value rows prepended to every layer's
//! attention context, in projected (post `W_k`, `W_v`) space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::{forward_adapted, Adapters, ForwardTrace, ModelConfig, TransformerModel, INIT_STD};

pub const NAMESPACE: &str = "prefix";

#[derive(Debug, Clone)]
pub struct PrefixAdapter {
    pub params: ParamStore,
    len: usize,
    n_layers: usize,
    d_model: usize,
}

impl PrefixAdapter {
    pub fn init(model: &ModelConfig, len: usize, seed: u64) -> Result<Self> {
        let d = model.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = ParamStore::new();
        if len > 0 {
            for l in 0..model.n_layers {
                for name in [Self::key_name(l), Self::value_name(l)] {
                    let data = (0..len * d).map(|_| normal.sample(&mut rng)).collect();
                    params.insert(name, Tensor::from_parts(vec![len, d], data), true)?;
                }
            }
        }
        Ok(Self {
            params,
            len,
            n_layers: model.n_layers,
            d_model: d,
        })
    }

    pub fn from_params(model: &ModelConfig, len: usize, params: ParamStore) -> Result<Self> {
        let reference = Self::init(model, len, 0)?;
        if params.len() != reference.params.len() {
            return Err(Error::contract("prefix parameter count does not match its length"));
        }
        for (name, t) in reference.params.iter() {
            if params.require(name)?.shape() != t.shape() {
                return Err(Error::contract(format!("prefix parameter {name} has the wrong shape")));
            }
        }
        let mut params = params;
        params.set_trainable(true);
        Ok(Self { params, ..reference })
    }

    pub fn key_name(layer: usize) -> String {
        format!("{NAMESPACE}.layer{layer}.key")
    }

    pub fn value_name(layer: usize) -> String {
        format!("{NAMESPACE}.layer{layer}.value")
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn check(&self, model: &ModelConfig) -> Result<()> {
        if self.len > 0 && (model.n_layers != self.n_layers || model.d_model != self.d_model) {
            return Err(Error::contract(format!(
                "prefix adapter built for {} layers × {}, model is {} × {}",
                self.n_layers, self.d_model, model.n_layers, model.d_model
            )));
        }
        Ok(())
    }

    /// `(P_k, P_v)` leaves for `layer`, each `p × d`.
    pub fn layer_vars<'a>(&'a self, tape: &mut Tape<'a>, layer: usize) -> Result<(Var, Var)> {
        let k = tape.param(&self.params, &Self::key_name(layer))?;
        let v = tape.param(&self.params, &Self::value_name(layer))?;
        Ok((k, v))
    }
}

pub fn prefix_forward(model: &TransformerModel, adapter: &PrefixAdapter, tokens: &[usize]) -> Result<ForwardTrace> {
    adapter.check(&model.config)?;
    forward_adapted(
        model,
        tokens,
        None,
        Adapters {
            lora: None,
            prefix: Some(adapter),
        },
    )
}
