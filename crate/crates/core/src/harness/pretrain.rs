//! Language-model pretraining of the backbone before it is frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tasks::{Example, Vocab};
use crate::transformer::{lm_loss, TransformerModel};

use super::data::pretraining_sequences;

/// Next-token training on unlabelled prompts, one sequence per step.
/// Returns the mean loss of each epoch.
pub fn pretrain_backbone(
    model: &mut TransformerModel,
    vocab: &Vocab,
    corpus: &[Example],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if model.is_frozen() {
        return Err(Error::contract("cannot pretrain a frozen model"));
    }
    if epochs > 0 && corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::new(AdamConfig {
        lr,
        weight_decay: 0.0,
        ..AdamConfig::default()
    });
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut seqs = pretraining_sequences(vocab, corpus, &mut rng)?;
        seqs.shuffle(&mut rng);
        let mut total = 0.0;
        for seq in &seqs {
            let grads = {
                let mut tape = Tape::new();
                let loss = lm_loss(&mut tape, model, seq)?;
                total += tape.value(loss).data()[0];
                tape.backward(loss)?;
                tape.param_grads()
            };
            model.params.accumulate_grads(&grads);
            model.params.fill_missing_grads();
            adam_step(&mut [&mut model.params], &mut state)?;
        }
        losses.push(total / seqs.len() as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_dataset, Family, TaskSpec};
    use crate::transformer::ModelConfig;

    #[test]
    fn loss_falls_and_runs_repeat_exactly() {
        let vocab = Vocab::build();
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            vocab_size: vocab.len(),
            max_seq_len: 48,
            tie_embeddings: true,
        };
        let corpus = generate_dataset(&TaskSpec { family: Family::Parity, seed: 2 }, 12).unwrap();
        let run = || {
            let mut m = TransformerModel::init(cfg.clone(), "large", 5).unwrap();
            let l = pretrain_backbone(&mut m, &vocab, &corpus, 3, 3e-3, 9).unwrap();
            (m, l)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert!(l1[2] < l1[0], "{l1:?}");
        assert_eq!(l1, l2);
        assert!(m1.params.values_equal(&m2.params));
        let mut frozen = m1.clone();
        frozen.freeze();
        assert!(pretrain_backbone(&mut frozen, &vocab, &corpus, 1, 1e-3, 0).is_err());
    }
}
