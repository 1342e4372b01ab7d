//! Comparison methods sharing the adapter training loop: zero-shot, k-shot
//! ICL, fixed task vectors, LoRA and prefix-tuning.

pub mod ftv;
pub mod icl;
pub mod lora;
pub mod prefix;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::atv::{answer_loss, train_adaptation, Adaptation, TrainConfig, TrainExample, TrainReport};
use crate::autodiff::{NamedGrads, Tape};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::transformer::{Adapters, PositionPolicy, TransformerModel};

pub use ftv::{build_fixed_task_vector, FixedTaskVector};
pub use icl::IclPromptBuilder;
pub use lora::{lora_forward, LoraAdapter, LoraConfig, LoraTarget};
pub use prefix::{prefix_forward, PrefixAdapter};

fn adapter_grads<'a>(
    large: &'a TransformerModel,
    example: &TrainExample,
    adapters: Adapters<'a>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, NamedGrads)> {
    let mut tape = Tape::new();
    let loss = answer_loss(
        &mut tape,
        large,
        &example.prompt,
        &example.answer,
        None,
        PositionPolicy::default(),
        adapters,
        rng,
    )?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    Ok((value, tape.param_grads()))
}

impl Adaptation for LoraAdapter {
    fn example_grads(
        &self,
        large: &TransformerModel,
        example: &TrainExample,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, NamedGrads)> {
        adapter_grads(
            large,
            example,
            Adapters {
                lora: Some(self),
                prefix: None,
            },
            rng,
        )
    }

    fn trainable_stores(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.params]
    }
}

impl Adaptation for PrefixAdapter {
    fn example_grads(
        &self,
        large: &TransformerModel,
        example: &TrainExample,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, NamedGrads)> {
        adapter_grads(
            large,
            example,
            Adapters {
                lora: None,
                prefix: Some(self),
            },
            rng,
        )
    }

    fn trainable_stores(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.params]
    }
}

/// A comparison method in its runnable state.
#[derive(Debug, Clone)]
pub enum Baseline {
    ZeroShot,
    Icl(IclPromptBuilder),
    /// One vector per family name.
    FixedVector(BTreeMap<String, FixedTaskVector>),
    Lora(LoraAdapter),
    Prefix(PrefixAdapter),
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::ZeroShot => "zero_shot",
            Baseline::Icl(_) => "icl",
            Baseline::FixedVector(_) => "ftv",
            Baseline::Lora(_) => "lora",
            Baseline::Prefix(_) => "prefix",
        }
    }
}

/// Trains the gradient-based baselines; the others need no training and
/// return `None`.
pub fn train_baseline(
    baseline: &mut Baseline,
    large: &TransformerModel,
    examples: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<Option<TrainReport>> {
    if !large.is_frozen() {
        return Err(Error::contract("the large model must be frozen before adapter training"));
    }
    match baseline {
        Baseline::Lora(a) => {
            a.check(&large.config)?;
            train_adaptation(a, large, examples, cfg).map(Some)
        }
        Baseline::Prefix(a) => {
            a.check(&large.config)?;
            train_adaptation(a, large, examples, cfg).map(Some)
        }
        _ => Ok(None),
    }
}
