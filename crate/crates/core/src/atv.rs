//! Adaptive task vectors: a small generator reads the raw query, a bias-free
//! linear map expands its last hidden state to one vector per layer of the
//! frozen large model, and those vectors are added to the large model's
//! last-token states.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NamedGrads, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::{
    forward, forward_tape, Adapters, ForwardTrace, InjectionHook, LogitRows, ModelConfig, PositionPolicy, TapeForward,
    TapeInjection, TransformerModel, INIT_STD,
};

pub const NAMESPACE: &str = "atv";
pub const GENERATOR_NAMESPACE: &str = "atv.generator";
pub const EXPANSION_NAME: &str = "atv.expansion";
pub const DEFAULT_LAMBDA: f64 = 0.001;

/// `W_exp ∈ R^{d_s × (L·d_l)}`; block `A_l` is columns `[l·d_l, (l+1)·d_l)`.
#[derive(Debug, Clone)]
pub struct AtvExpansion {
    pub params: ParamStore,
    d_small: usize,
    n_layers: usize,
    d_large: usize,
}

impl AtvExpansion {
    pub fn init(d_small: usize, n_layers: usize, d_large: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n = d_small * n_layers * d_large;
        let w = Tensor::new(vec![d_small, n_layers * d_large], (0..n).map(|_| normal.sample(&mut rng)).collect())?;
        Self::from_weight(w, n_layers)
    }

    pub fn from_weight(weight: Tensor, n_layers: usize) -> Result<Self> {
        let (d_small, cols) = weight.dims2();
        if weight.shape().len() != 2 || n_layers == 0 || cols % n_layers != 0 {
            return Err(Error::contract(format!(
                "expansion weight {:?} cannot be split into {n_layers} layer blocks",
                weight.shape()
            )));
        }
        let mut params = ParamStore::new();
        params.insert(EXPANSION_NAME, weight, true)?;
        Ok(Self {
            params,
            d_small,
            n_layers,
            d_large: cols / n_layers,
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.params.get(EXPANSION_NAME).expect("expansion weight present")
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        self.params.get_mut(EXPANSION_NAME).expect("expansion weight present")
    }

    pub fn d_small(&self) -> usize {
        self.d_small
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_large(&self) -> usize {
        self.d_large
    }

    /// `A_l` as a `d_s × d_l` matrix.
    pub fn block(&self, layer: usize) -> Result<Tensor> {
        if layer >= self.n_layers {
            return Err(Error::Index {
                op: "expansion block",
                index: layer,
                bound: self.n_layers,
            });
        }
        let w = self.weight().data();
        let cols = self.n_layers * self.d_large;
        let data = (0..self.d_small)
            .flat_map(|i| w[i * cols + layer * self.d_large..i * cols + (layer + 1) * self.d_large].iter().copied())
            .collect();
        Tensor::new(vec![self.d_small, self.d_large], data)
    }

    /// `reshape(v_small · W_exp)` to `L × d_l`.
    pub fn apply(&self, v_small: &[f64]) -> Result<Tensor> {
        if v_small.len() != self.d_small {
            return Err(Error::contract(format!(
                "v_small has {} entries, expansion expects {}",
                v_small.len(),
                self.d_small
            )));
        }
        let v = Tensor::from_parts(vec![1, self.d_small], v_small.to_vec());
        v.matmul(self.weight())?.reshape(vec![self.n_layers, self.d_large])
    }
}

#[derive(Debug, Clone)]
pub struct AtvAdapter {
    pub generator: TransformerModel,
    pub expansion: AtvExpansion,
    pub lambda: f64,
    pub layers: BTreeSet<usize>,
    pub policy: PositionPolicy,
}

impl AtvAdapter {
    pub fn new(generator: TransformerModel, expansion: AtvExpansion, lambda: f64, layers: BTreeSet<usize>) -> Result<Self> {
        if generator.config.d_model != expansion.d_small() {
            return Err(Error::contract(format!(
                "generator hidden size {} does not match expansion input {}",
                generator.config.d_model,
                expansion.d_small()
            )));
        }
        if !lambda.is_finite() {
            return Err(Error::config("atv.lambda", "must be finite"));
        }
        if let Some(&l) = layers.iter().find(|&&l| l >= expansion.n_layers()) {
            return Err(Error::contract(format!("layer {l} outside 0..{}", expansion.n_layers())));
        }
        Ok(Self {
            generator,
            expansion,
            lambda,
            layers,
            policy: PositionPolicy::default(),
        })
    }

    /// Fresh generator and expansion targeting `large`, injecting at all layers.
    pub fn init(generator: ModelConfig, large: &ModelConfig, lambda: f64, seed: u64) -> Result<Self> {
        let d_small = generator.d_model;
        let gen = TransformerModel::init(generator, GENERATOR_NAMESPACE, seed)?;
        let exp = AtvExpansion::init(d_small, large.n_layers, large.d_model, seed.wrapping_add(1))?;
        Self::new(gen, exp, lambda, (0..large.n_layers).collect())
    }

    pub fn check_target(&self, large: &TransformerModel) -> Result<()> {
        if !large.is_frozen() {
            return Err(Error::contract("the large model must be frozen"));
        }
        if large.config.n_layers != self.expansion.n_layers() || large.config.d_model != self.expansion.d_large() {
            return Err(Error::contract(format!(
                "expansion targets {} layers × {}, large model is {} × {}",
                self.expansion.n_layers(),
                self.expansion.d_large(),
                large.config.n_layers,
                large.config.d_model
            )));
        }
        Ok(())
    }

    /// Injection hook for already-expanded vectors.
    pub fn hook(&self, v_atv: &Tensor) -> InjectionHook {
        InjectionHook {
            policy: self.policy,
            ..InjectionHook::from_matrix(self.lambda, v_atv, self.layers.clone())
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.generator.params.num_trainable() + self.expansion.params.num_trainable()
    }

    /// Records `v_small` and the per-layer slices of `v_small · W_exp`.
    fn tape_vectors<'a>(&'a self, tape: &mut Tape<'a>, query: &[usize]) -> Result<Vec<Option<Var>>> {
        let trace = forward_tape(
            tape,
            &self.generator,
            query,
            &mut TapeForward {
                logits: LogitRows::None,
                ..TapeForward::default()
            },
        )?;
        let v_small = *trace.hidden.last().expect("at least one layer");
        let w = tape.param(&self.expansion.params, EXPANSION_NAME)?;
        let flat = tape.matmul(v_small, w)?;
        let d = self.expansion.d_large();
        (0..self.expansion.n_layers())
            .map(|l| {
                if self.layers.contains(&l) {
                    tape.slice_cols(flat, l * d, d).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    }
}

/// Last-layer, last-token generator state on the raw query.
pub fn generate_v_small(adapter: &AtvAdapter, query: &[usize]) -> Result<Vec<f64>> {
    if query.is_empty() {
        return Err(Error::contract("empty query"));
    }
    let mut trace = forward(&adapter.generator, query, None)?;
    Ok(trace.hidden.pop().expect("at least one layer"))
}

pub fn expand(adapter: &AtvAdapter, v_small: &[f64]) -> Result<Tensor> {
    adapter.expansion.apply(v_small)
}

/// `v_ATV = f_θ(v_small(query))`, `L × d_l`.
pub fn adaptive_vectors(adapter: &AtvAdapter, query: &[usize]) -> Result<Tensor> {
    expand(adapter, &generate_v_small(adapter, query)?)
}

/// Large-model forward on `prompt`, steered by vectors generated from `query`.
pub fn steered_forward(adapter: &AtvAdapter, large: &TransformerModel, query: &[usize], prompt: &[usize]) -> Result<ForwardTrace> {
    adapter.check_target(large)?;
    let hook = adapter.hook(&adaptive_vectors(adapter, query)?);
    forward(large, prompt, Some(&hook))
}

/// One supervised item: the generator reads `query`, the large model reads
/// `prompt` and is trained to continue it with `answer`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub query: Vec<usize>,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    pub family: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 5e-4,
            weight_decay: 1e-5,
            batch_size: 1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean loss over the training set before the first update.
    pub initial_loss: f64,
    /// Mean online loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    /// Gradient entries ever produced for large-model parameters.
    pub frozen_grad_entries: usize,
    pub frozen_grad_abs_max: f64,
}

/// Per-family shuffles merged round-robin, so consecutive steps cycle
/// through the families.
pub fn interleaved_order(examples: &[TrainExample], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut families: Vec<&str> = Vec::new();
    for ex in examples {
        if !families.contains(&ex.family.as_str()) {
            families.push(&ex.family);
        }
    }
    let mut queues: Vec<Vec<usize>> = families
        .iter()
        .map(|f| (0..examples.len()).filter(|&i| examples[i].family == *f).collect())
        .collect();
    for q in &mut queues {
        q.shuffle(rng);
        q.reverse();
    }
    let mut order = Vec::with_capacity(examples.len());
    while order.len() < examples.len() {
        for q in &mut queues {
            if let Some(i) = q.pop() {
                order.push(i);
            }
        }
    }
    order
}

/// Teacher-forced mean cross-entropy of `answer` after `prompt`. Injection
/// vectors (if any) land on the row chosen by `policy`.
pub fn answer_loss<'a>(
    tape: &mut Tape<'a>,
    large: &'a TransformerModel,
    prompt: &[usize],
    answer: &[usize],
    injection: Option<(&[Option<Var>], f64)>,
    policy: PositionPolicy,
    adapters: Adapters<'a>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if answer.is_empty() || prompt.is_empty() {
        return Err(Error::contract("answer loss needs a prompt and an answer"));
    }
    let make = |row: usize| {
        injection.map(|(vectors, scale)| TapeInjection {
            vectors: vectors.to_vec(),
            scale,
            row,
        })
    };
    match policy {
        PositionPolicy::CurrentLastEachStep => {
            let mut total: Option<Var> = None;
            for j in 0..answer.len() {
                let mut seq = prompt.to_vec();
                seq.extend_from_slice(&answer[..j]);
                let mut opts = TapeForward {
                    injection: make(seq.len() - 1),
                    adapters,
                    dropout_rng: rng.as_deref_mut(),
                    logits: LogitRows::Last,
                };
                let trace = forward_tape(tape, large, &seq, &mut opts)?;
                let l = tape.cross_entropy(trace.logits.expect("requested"), &answer[j..=j])?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.expect("non-empty answer");
            if answer.len() == 1 {
                Ok(total)
            } else {
                tape.scale(total, 1.0 / answer.len() as f64)
            }
        }
        PositionPolicy::PromptFinalOnly => {
            let mut seq = prompt.to_vec();
            seq.extend_from_slice(&answer[..answer.len() - 1]);
            let mut opts = TapeForward {
                injection: make(prompt.len() - 1),
                adapters,
                dropout_rng: rng,
                logits: LogitRows::All,
            };
            let trace = forward_tape(tape, large, &seq, &mut opts)?;
            let rows: Vec<usize> = (prompt.len() - 1..seq.len()).collect();
            let picked = tape.gather_rows(trace.logits.expect("requested"), &rows)?;
            tape.cross_entropy(picked, answer)
        }
    }
}

/// A trainable intervention on a frozen large model.
pub trait Adaptation {
    /// Loss and named parameter gradients for one example.
    fn example_grads(
        &self,
        large: &TransformerModel,
        example: &TrainExample,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, NamedGrads)>;

    fn trainable_stores(&mut self) -> Vec<&mut ParamStore>;

    fn example_loss(&self, large: &TransformerModel, example: &TrainExample) -> Result<f64> {
        Ok(self.example_grads(large, example, None)?.0)
    }
}

impl Adaptation for AtvAdapter {
    fn example_grads(
        &self,
        large: &TransformerModel,
        example: &TrainExample,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, NamedGrads)> {
        let mut tape = Tape::new();
        let vectors = self.tape_vectors(&mut tape, &example.query)?;
        let loss = answer_loss(
            &mut tape,
            large,
            &example.prompt,
            &example.answer,
            Some((&vectors, self.lambda)),
            self.policy,
            Adapters::none(),
            rng,
        )?;
        let value = tape.value(loss).data()[0];
        tape.backward(loss)?;
        Ok((value, tape.param_grads()))
    }

    fn trainable_stores(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.generator.params, &mut self.expansion.params]
    }
}

/// Adam over the adaptation's parameters with the large model frozen.
pub fn train_adaptation<A: Adaptation>(
    adaptation: &mut A,
    large: &TransformerModel,
    examples: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !large.is_frozen() {
        return Err(Error::contract("the large model must be frozen before adapter training"));
    }
    if examples.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let frozen_prefix = format!("{}.", large.namespace);
    let mut report = TrainReport {
        initial_loss: 0.0,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
        frozen_grad_entries: 0,
        frozen_grad_abs_max: 0.0,
    };
    let mut initial = 0.0;
    for ex in examples {
        initial += adaptation.example_loss(large, ex)?;
    }
    report.initial_loss = initial / examples.len() as f64;
    if adaptation.trainable_stores().iter().all(|s| s.num_trainable() == 0) {
        report.epoch_losses = vec![report.initial_loss; cfg.epochs];
        return Ok(report);
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = AdamState::new(cfg.adam());
    let inv_batch = 1.0 / cfg.batch_size as f64;
    for _ in 0..cfg.epochs {
        let order = interleaved_order(examples, &mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = if batch.len() == cfg.batch_size { inv_batch } else { 1.0 / batch.len() as f64 };
            for &i in batch {
                let (loss, mut grads) = adaptation.example_grads(large, &examples[i], Some(&mut dropout_rng))?;
                epoch_loss += loss;
                for (name, g) in &mut grads {
                    if name.starts_with(&frozen_prefix) {
                        report.frozen_grad_entries += 1;
                        let m = g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                        report.frozen_grad_abs_max = report.frozen_grad_abs_max.max(m);
                    }
                    g.iter_mut().for_each(|x| *x *= scale);
                }
                for store in adaptation.trainable_stores() {
                    store.accumulate_grads(&grads);
                }
            }
            let mut stores = adaptation.trainable_stores();
            for store in stores.iter_mut() {
                store.fill_missing_grads();
            }
            adam_step(&mut stores, &mut state)?;
            report.steps += 1;
        }
        report.epoch_losses.push(epoch_loss / examples.len() as f64);
    }
    Ok(report)
}

pub fn train_atv(
    adapter: &mut AtvAdapter,
    large: &TransformerModel,
    examples: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    adapter.check_target(large)?;
    train_adaptation(adapter, large, examples, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn large_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab_size: 13,
            max_seq_len: 24,
            tie_embeddings: true,
        }
    }

    fn gen_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            ffn_dim: 8,
            ..large_cfg()
        }
    }

    fn frozen_large() -> TransformerModel {
        let mut m = TransformerModel::init(large_cfg(), "large", 7).unwrap();
        m.freeze();
        m
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn expand_basis_vector_selects_first_rows() {
        let w = Tensor::new(vec![3, 8], (0..24).map(f64::from).collect()).unwrap();
        let e = AtvExpansion::from_weight(w, 2).unwrap();
        let out = e.apply(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert_eq!(out.row(0), e.block(0).unwrap().row(0));
        assert_eq!(out.row(1), e.block(1).unwrap().row(0));
        assert_eq!(out.row(1), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn expand_zero_and_linearity() {
        let e = AtvExpansion::init(3, 2, 4, 1).unwrap();
        assert!(e.apply(&[0.0; 3]).unwrap().data().iter().all(|&x| x == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = u.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
        let lhs = e.apply(&mix).unwrap();
        let rhs = e.apply(&u).unwrap().scale(a).add(&e.apply(&w).unwrap().scale(b)).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(e.apply(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn v_small_shape_and_adaptivity() {
        let large = frozen_large();
        let a = AtvAdapter::init(gen_cfg(), &large.config, DEFAULT_LAMBDA, 3).unwrap();
        let v1 = generate_v_small(&a, &[1, 2, 3]).unwrap();
        let v2 = generate_v_small(&a, &[1, 5, 3]).unwrap();
        assert_eq!(v1.len(), 4);
        assert_ne!(v1, v2);
        assert_eq!(v1, generate_v_small(&a, &[1, 2, 3]).unwrap());
        assert!(generate_v_small(&a, &[]).is_err());
    }

    #[test]
    fn null_steering_is_bitwise_identity() {
        let large = frozen_large();
        let prompt = [1, 4, 9, 2];
        let base = forward(&large, &prompt, None).unwrap();
        let mut a = AtvAdapter::init(gen_cfg(), &large.config, 0.0, 3).unwrap();
        assert_eq!(bits(&steered_forward(&a, &large, &[3, 4], &prompt).unwrap().logits), bits(&base.logits));
        a.lambda = DEFAULT_LAMBDA;
        a.layers.clear();
        assert_eq!(bits(&steered_forward(&a, &large, &[3, 4], &prompt).unwrap().logits), bits(&base.logits));
    }

    #[test]
    fn default_lambda_gives_small_nonzero_change() {
        let large = frozen_large();
        let prompt = [1, 4, 9, 2];
        let base = forward(&large, &prompt, None).unwrap();
        let a = AtvAdapter::init(gen_cfg(), &large.config, DEFAULT_LAMBDA, 3).unwrap();
        let steered = steered_forward(&a, &large, &[3, 4], &prompt).unwrap();
        let diff = base
            .logits
            .data()
            .iter()
            .zip(steered.logits.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0 && diff < 1e-2, "{diff}");
        // Only the last position is affected.
        let (t, v) = base.logits.dims2();
        assert_eq!(&base.logits.data()[..(t - 1) * v], &steered.logits.data()[..(t - 1) * v]);
    }

    #[test]
    fn unfrozen_large_model_rejected() {
        let large = TransformerModel::init(large_cfg(), "large", 7).unwrap();
        let mut a = AtvAdapter::init(gen_cfg(), &large.config, DEFAULT_LAMBDA, 3).unwrap();
        let ex = TrainExample {
            query: vec![1, 2],
            prompt: vec![1, 2, 3],
            answer: vec![4],
            family: "f".into(),
        };
        assert!(matches!(
            train_atv(&mut a, &large, &[ex], &TrainConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    fn toy_examples() -> Vec<TrainExample> {
        (0..6)
            .map(|i| TrainExample {
                query: vec![1, 2 + i % 3],
                prompt: vec![1, 2 + i % 3, 9],
                answer: vec![10 + i % 2],
                family: if i % 2 == 0 { "a".into() } else { "b".into() },
            })
            .collect()
    }

    #[test]
    fn training_changes_only_adapter() {
        let large = frozen_large();
        let before = large.params.clone();
        let mut a = AtvAdapter::init(gen_cfg(), &large.config, 0.5, 3).unwrap();
        let gen_before = a.generator.params.clone();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let report = train_atv(&mut a, &large, &toy_examples(), &cfg).unwrap();
        assert!(large.params.values_equal(&before));
        assert!(!a.generator.params.values_equal(&gen_before));
        assert_eq!(report.epoch_losses.len(), 2);
        assert_eq!(report.steps, 12);
        assert_eq!(report.frozen_grad_entries, 0);
    }

    #[test]
    fn single_step_descends_for_small_lr() {
        let large = frozen_large();
        let ex = toy_examples().remove(0);
        for lr in [1e-2, 1e-3, 1e-4] {
            let mut a = AtvAdapter::init(gen_cfg(), &large.config, 0.5, 3).unwrap();
            let before = a.example_loss(&large, &ex).unwrap();
            let cfg = TrainConfig {
                epochs: 1,
                lr,
                weight_decay: 0.0,
                ..TrainConfig::default()
            };
            train_atv(&mut a, &large, std::slice::from_ref(&ex), &cfg).unwrap();
            let after = a.example_loss(&large, &ex).unwrap();
            if lr <= 1e-4 {
                assert!(after < before, "lr {lr}: {before} -> {after}");
            }
        }
    }

    #[test]
    fn interleaving_alternates_families() {
        let ex = toy_examples();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let order = interleaved_order(&ex, &mut rng);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        for pair in order.chunks(2) {
            assert_ne!(ex[pair[0]].family, ex[pair[1]].family);
        }
    }

    #[test]
    fn position_policies_agree_on_single_token_answers() {
        let large = frozen_large();
        let mut a = AtvAdapter::init(gen_cfg(), &large.config, 0.5, 3).unwrap();
        let ex = toy_examples().remove(1);
        let l1 = a.example_loss(&large, &ex).unwrap();
        a.policy = PositionPolicy::PromptFinalOnly;
        let l2 = a.example_loss(&large, &ex).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }
}
