use std::collections::BTreeSet;

use atv_core::atv::{Adaptation, AtvAdapter, TrainExample};
use atv_core::baselines::{LoraAdapter, LoraConfig, PrefixAdapter};
use atv_core::gradcheck::{check_store_grads, verify_ops, verify_transformer};
use atv_core::transformer::{ModelConfig, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

#[test]
fn every_op_matches_finite_differences() {
    let entries = verify_ops(SEEDS, TOL).unwrap();
    assert!(entries.len() >= 20);
    for e in &entries {
        assert!(e.passed, "{e:?}");
    }
}

#[test]
fn two_layer_transformer_matches_finite_differences() {
    let e = verify_transformer(SEEDS, TOL).unwrap();
    assert!(e.passed, "{e:?}");
}

fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        vocab_size: 11,
        max_seq_len: 10,
        tie_embeddings: true,
    }
}

fn jitter(rng: &mut ChaCha8Rng, store: &mut atv_core::params::ParamStore, spread: f64) {
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-spread..spread));
    }
}

fn frozen_large(seed: u64) -> TransformerModel {
    let mut m = TransformerModel::init(small_config(), "large", seed).unwrap();
    jitter(&mut ChaCha8Rng::seed_from_u64(seed + 77), &mut m.params, 0.3);
    m.freeze();
    m
}

fn example(rng: &mut ChaCha8Rng) -> TrainExample {
    TrainExample {
        query: (0..4).map(|_| rng.random_range(0..11)).collect(),
        prompt: (0..5).map(|_| rng.random_range(0..11)).collect(),
        answer: (0..2).map(|_| rng.random_range(0..11)).collect(),
        family: "f".into(),
    }
}

fn check_adaptation<A: Adaptation>(adapter: &mut A, large: &TransformerModel, ex: &TrainExample) -> f64 {
    let (_, grads) = adapter.example_grads(large, ex, None).unwrap();
    assert!(grads.iter().all(|(n, _)| !n.starts_with("large.")));
    check_store_grads(adapter, |a| a.trainable_stores(), |a| a.example_loss(large, ex), &grads).unwrap()
}

#[test]
fn atv_gradients_pass_through_frozen_model() {
    for seed in 0..SEEDS {
        let large = frozen_large(seed);
        let gen = ModelConfig {
            d_model: 4,
            ffn_dim: 8,
            ..small_config()
        };
        let mut a = AtvAdapter::init(gen, &large.config, 0.5, seed).unwrap();
        a.layers = BTreeSet::from([0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
        for s in a.trainable_stores() {
            jitter(&mut rng, s, 0.3);
        }
        let ex = example(&mut rng);
        let e = check_adaptation(&mut a, &large, &ex);
        assert!(e <= TOL, "seed {seed}: {e}");
    }
}

#[test]
fn lora_and_prefix_gradients() {
    for seed in 0..SEEDS {
        let large = frozen_large(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 9);
        let cfg = LoraConfig {
            rank: 2,
            alpha: 4.0,
            dropout: 0.0,
        };
        let mut lora = LoraAdapter::init(&large.config, cfg, seed).unwrap();
        jitter(&mut rng, &mut lora.params, 0.5);
        let ex = example(&mut rng);
        let e = check_adaptation(&mut lora, &large, &ex);
        assert!(e <= TOL, "lora seed {seed}: {e}");
        let mut prefix = PrefixAdapter::init(&large.config, 2, seed).unwrap();
        let e = check_adaptation(&mut prefix, &large, &ex);
        assert!(e <= TOL, "prefix seed {seed}: {e}");
    }
}
