use std::collections::BTreeSet;

use atv_core::atv::{adaptive_vectors, expand, generate_v_small, AtvAdapter};
use atv_core::autodiff::Tape;
use atv_core::harness::config::RunConfig;
use atv_core::tasks::{generate_dataset, render_prompt, tokenize, variants, Family, TaskSpec, Vocab};
use atv_core::tensor::Tensor;
use atv_core::theory::{singular_values, verify_theorem1, verify_theorem2, Theorem1Dims, Theorem2Dims};
use atv_core::transformer::{forward, InjectionHook, ModelConfig, TransformerModel};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        vocab_size: 19,
        max_seq_len: 12,
        tie_embeddings: true,
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn family() -> impl Strategy<Value = Family> {
    prop::sample::select(Family::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        for row in tape.value(s).data().chunks(4) {
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn logits_are_causal(seed in 0u64..1000, tokens in prop::collection::vec(0usize..19, 2..12), cut in 0usize..10, fill in 0usize..19) {
        let m = TransformerModel::init(cfg(), "m", seed).unwrap();
        let cut = cut % (tokens.len() - 1);
        let mut changed = tokens.clone();
        for t in &mut changed[cut + 1..] {
            *t = (*t + 1 + fill) % 19;
        }
        let a = forward(&m, &tokens, None).unwrap();
        let b = forward(&m, &changed, None).unwrap();
        let v = m.config.vocab_size;
        prop_assert_eq!(&a.logits.data()[..(cut + 1) * v], &b.logits.data()[..(cut + 1) * v]);
    }

    #[test]
    fn injection_touches_only_the_last_row(seed in 0u64..1000, tokens in prop::collection::vec(0usize..19, 2..12), lambda in 0.01f64..2.0, mask in 1u8..8) {
        let m = TransformerModel::init(cfg(), "m", seed).unwrap();
        let (l, d) = (m.config.n_layers, m.config.d_model);
        let vectors = Tensor::new(vec![l, d], (0..l * d).map(|i| ((i * 7 + seed as usize) % 11) as f64 - 5.0).collect()).unwrap();
        let layers: BTreeSet<usize> = (0..l).filter(|i| mask & (1 << i) != 0).collect();
        let base = forward(&m, &tokens, None).unwrap();
        let hooked = forward(&m, &tokens, Some(&InjectionHook::from_matrix(lambda, &vectors, layers))).unwrap();
        let v = m.config.vocab_size;
        let keep = (tokens.len() - 1) * v;
        prop_assert_eq!(&base.logits.data()[..keep], &hooked.logits.data()[..keep]);
        prop_assert_ne!(&base.logits.data()[keep..], &hooked.logits.data()[keep..]);
        let off = forward(&m, &tokens, Some(&InjectionHook::from_matrix(0.0, &vectors, (0..l).collect()))).unwrap();
        let empty = forward(&m, &tokens, Some(&InjectionHook::from_matrix(lambda, &vectors, BTreeSet::new()))).unwrap();
        prop_assert_eq!(bits(&off.logits), bits(&base.logits));
        prop_assert_eq!(bits(&empty.logits), bits(&base.logits));
    }

    #[test]
    fn expansion_is_linear_and_rank_bounded(seed in 0u64..1000, scale in -3.0f64..3.0) {
        let large = TransformerModel::init(cfg(), "large", seed).unwrap();
        let gen = ModelConfig { d_model: 4, ffn_dim: 8, ..cfg() };
        let a = AtvAdapter::init(gen, &large.config, 0.001, seed).unwrap();
        let x = [0.5, -1.0, 2.0, 0.25];
        let y = [1.5, 0.0, -0.5, 3.0];
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| scale * p + q).collect();
        let (ex, ey, ec) = (expand(&a, &x).unwrap(), expand(&a, &y).unwrap(), expand(&a, &combo).unwrap());
        for ((c, p), q) in ec.data().iter().zip(ex.data()).zip(ey.data()) {
            prop_assert!((c - (scale * p + q)).abs() <= 1e-12 * (1.0 + c.abs()));
        }
        prop_assert!(expand(&a, &[0.0; 4]).unwrap().data().iter().all(|&z| z == 0.0));

        // Stacked λ·v over many queries and all layers spans ≤ d_s directions.
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let q: Vec<usize> = (0..5).map(|j| (i * 3 + j * 5 + seed as usize) % 19).collect();
                let v = generate_v_small(&a, &q).unwrap();
                let full = adaptive_vectors(&a, &q).unwrap();
                prop_assert_eq!(bits(&full), bits(&expand(&a, &v).unwrap()));
                Ok(full.data().iter().map(|z| 0.001 * z).collect())
            })
            .collect::<Result<_, TestCaseError>>()?;
        let m = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
        let s = singular_values(&m);
        prop_assert!(s[4] <= 1e-10 * s[0]);
    }

    #[test]
    fn datasets_are_deterministic_balanced_and_recomputable(f in family(), seed in 0u64..10_000, n in 6usize..120) {
        let spec = TaskSpec { family: f, seed };
        let a = generate_dataset(&spec, n).unwrap();
        prop_assert_eq!(&a, &generate_dataset(&spec, n).unwrap());
        let k = f.options().len();
        let mut counts = vec![0usize; k];
        for e in &a {
            prop_assert_eq!(f.label(&e.question).unwrap(), e.gold);
            counts[e.gold] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn renderings_tokenize_losslessly(f in family(), seed in 0u64..10_000) {
        let vocab = Vocab::build();
        let ex = &generate_dataset(&TaskSpec { family: f, seed }, 1).unwrap()[0];
        let mut seen = BTreeSet::new();
        for (t, p) in variants() {
            let (prompt, answers) = render_prompt(ex, t, p).unwrap();
            let ids = tokenize(&vocab, &prompt);
            prop_assert!(!ids.contains(&vocab.unk()));
            prop_assert_eq!(vocab.decode(&ids), prompt.clone());
            prop_assert_eq!(&answers, &ex.options);
            seen.insert(prompt);
        }
        prop_assert_eq!(seen.len(), 9);
    }

    #[test]
    fn config_text_round_trips(lambda in 1e-6f64..1.0, lr in 1e-6f64..1e-1, epochs in 1usize..40, seeds in prop::collection::vec(0u64..1000, 1..4)) {
        let mut c = RunConfig::default();
        c.lambda = lambda;
        c.lr = lr;
        c.epochs = epochs;
        c.seeds = seeds;
        prop_assert_eq!(RunConfig::parse_text(&c.to_text()).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn theory_suites_hold_for_any_seed(seed in any::<u64>()) {
        let t1 = verify_theorem1(3, seed, Theorem1Dims::default(), 1e-8).unwrap();
        let t2 = verify_theorem2(3, seed, Theorem2Dims::default(), 1e-10).unwrap();
        prop_assert!(t1.passed(), "{:?}", t1.failing().collect::<Vec<_>>());
        prop_assert!(t2.passed(), "{:?}", t2.failing().collect::<Vec<_>>());
    }
}
