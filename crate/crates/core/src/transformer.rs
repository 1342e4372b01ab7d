//! Post-LN decoder-only transformer with last-token capture and injection.
//!
//! Each layer computes
//! `h~ = LN(h + Attn(h))`, `h' = LN(h~ + MLP(h~))` with causal multi-head
//! softmax attention scaled by `1/sqrt(d_k)`. The captured hidden state of a
//! layer is the last-token row of `h'`, after any injection at that layer, and
//! the injection `h' += lambda * v` is applied before the next layer reads it.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::baselines::lora::{LoraAdapter, LoraTarget};
use crate::baselines::prefix::PrefixAdapter;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter count implied by the configuration.
    pub fn num_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * (d * d + d) + 2 * 2 * d + d * self.ffn_dim + self.ffn_dim + self.ffn_dim * d + d;
        let head = if self.tie_embeddings { 0 } else { d * self.vocab_size };
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + head
    }
}

/// Weight names of one layer, in initialization order.
const LAYER_PARAMS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1.gain", "ln1.bias", "w1", "b1", "w2", "b2",
    "ln2.gain", "ln2.bias",
];

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub namespace: String,
    pub params: ParamStore,
    frozen: bool,
}

impl TransformerModel {
    /// Deterministic initialization: weights ~ N(0, 0.02²), biases 0, norm
    /// gains 1.
    pub fn init(config: ModelConfig, namespace: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut sample = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_parts(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
        };
        let (d, f) = (config.d_model, config.ffn_dim);
        let mut params = ParamStore::new();
        params.insert(format!("{namespace}.tok_emb"), sample(&[config.vocab_size, d]), true)?;
        params.insert(format!("{namespace}.pos_emb"), sample(&[config.max_seq_len, d]), true)?;
        for l in 0..config.n_layers {
            for name in LAYER_PARAMS {
                let t = match name {
                    "wq" | "wk" | "wv" | "wo" => sample(&[d, d]),
                    "w1" => sample(&[d, f]),
                    "w2" => sample(&[f, d]),
                    "b1" => Tensor::zeros(&[f]),
                    "ln1.gain" | "ln2.gain" => Tensor::full(&[d], 1.0),
                    _ => Tensor::zeros(&[d]),
                };
                params.insert(format!("{namespace}.layer{l}.{name}"), t, true)?;
            }
        }
        if !config.tie_embeddings {
            params.insert(format!("{namespace}.lm_head"), sample(&[d, config.vocab_size]), true)?;
        }
        Ok(Self {
            config,
            namespace: namespace.to_string(),
            params,
            frozen: false,
        })
    }

    /// Rebuilds a model from previously saved parameters.
    pub fn from_params(config: ModelConfig, namespace: &str, params: ParamStore, frozen: bool) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), namespace, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "from_params",
                    lhs: t.shape().to_vec(),
                    rhs: got.shape().to_vec(),
                });
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::contract(format!(
                "expected {} parameters under {namespace}, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        let mut m = Self {
            config,
            namespace: namespace.to_string(),
            params,
            frozen: false,
        };
        if frozen {
            m.freeze();
        } else {
            m.params.set_trainable(true);
        }
        Ok(m)
    }

    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.namespace)
    }

    pub fn layer_name(&self, layer: usize, suffix: &str) -> String {
        format!("{}.layer{layer}.{suffix}", self.namespace)
    }
}

/// Where an injected vector lands during option scoring and decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionPolicy {
    /// Stays on the final prompt token.
    PromptFinalOnly,
    /// Follows the last token of the sequence at every step.
    #[default]
    CurrentLastEachStep,
}

/// Additive last-token steering `h^l <- h^l + lambda * v^l` on a layer subset.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionHook {
    pub lambda: f64,
    /// One entry per layer; `None` leaves that layer untouched.
    pub vectors: Vec<Option<Vec<f64>>>,
    pub layers: BTreeSet<usize>,
    pub policy: PositionPolicy,
}

impl InjectionHook {
    /// Full-depth hook from an `L × d` matrix of per-layer vectors.
    pub fn from_matrix(lambda: f64, vectors: &Tensor, layers: BTreeSet<usize>) -> Self {
        let (l, _) = vectors.dims2();
        Self {
            lambda,
            vectors: (0..l).map(|i| Some(vectors.row(i).to_vec())).collect(),
            layers,
            policy: PositionPolicy::default(),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.vectors.len() != config.n_layers {
            return Err(Error::contract(format!(
                "hook has {} layer slots, model has {} layers",
                self.vectors.len(),
                config.n_layers
            )));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= config.n_layers) {
            return Err(Error::contract(format!("hook layer {l} outside 0..{}", config.n_layers)));
        }
        for (l, v) in self.vectors.iter().enumerate() {
            if let Some(v) = v {
                if v.len() != config.d_model {
                    return Err(Error::contract(format!(
                        "hook vector for layer {l} has {} entries, hidden size is {}",
                        v.len(),
                        config.d_model
                    )));
                }
            }
        }
        Ok(())
    }

    fn active(&self, layer: usize) -> Option<&Vec<f64>> {
        if self.layers.contains(&layer) {
            self.vectors[layer].as_ref()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Last-token hidden state after each layer (post-injection).
    pub hidden: Vec<Vec<f64>>,
    /// `T × V` logits.
    pub logits: Tensor,
}

/// Parameter-efficient adapters applied inside attention.
#[derive(Debug, Clone, Copy, Default)]
pub struct Adapters<'a> {
    pub lora: Option<&'a LoraAdapter>,
    pub prefix: Option<&'a PrefixAdapter>,
}

impl<'a> Adapters<'a> {
    pub fn none() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
    None,
}

/// Injection expressed on the tape, so gradients can reach the vectors.
#[derive(Debug, Clone)]
pub struct TapeInjection {
    pub vectors: Vec<Option<Var>>,
    pub scale: f64,
    pub row: usize,
}

pub struct TapeForward<'o, 'a> {
    pub injection: Option<TapeInjection>,
    pub adapters: Adapters<'a>,
    /// Training-mode dropout source for adapters; `None` means eval mode.
    pub dropout_rng: Option<&'o mut ChaCha8Rng>,
    pub logits: LogitRows,
}

impl Default for TapeForward<'_, '_> {
    fn default() -> Self {
        Self {
            injection: None,
            adapters: Adapters::none(),
            dropout_rng: None,
            logits: LogitRows::All,
        }
    }
}

pub struct TapeTrace {
    /// Last-token `1 × d` rows per layer.
    pub hidden: Vec<Var>,
    /// Final `T × d` hidden states.
    pub output: Var,
    pub logits: Option<Var>,
}

fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Capacity {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index {
            op: "tokens",
            index: t,
            bound: config.vocab_size,
        });
    }
    Ok(())
}

/// Records a full forward pass on `tape`.
pub fn forward_tape<'a>(
    tape: &mut Tape<'a>,
    model: &'a TransformerModel,
    tokens: &[usize],
    opts: &mut TapeForward<'_, 'a>,
) -> Result<TapeTrace> {
    let cfg = &model.config;
    check_tokens(cfg, tokens)?;
    let t = tokens.len();
    let (d, dk) = (cfg.d_model, cfg.head_dim());
    if let Some(inj) = &opts.injection {
        if inj.vectors.len() != cfg.n_layers {
            return Err(Error::contract("injection must list every layer"));
        }
        if inj.row >= t {
            return Err(Error::Index {
                op: "injection row",
                index: inj.row,
                bound: t,
            });
        }
    }
    let store = &model.params;
    let p = |tape: &mut Tape<'a>, n: String| tape.param(store, &n);

    let tok_emb = p(tape, model.name("tok_emb"))?;
    let pos_emb = p(tape, model.name("pos_emb"))?;
    let te = tape.embedding(tok_emb, tokens)?;
    let positions: Vec<usize> = (0..t).collect();
    let pe = tape.embedding(pos_emb, &positions)?;
    let mut x = tape.add(te, pe)?;

    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    let mut hidden = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let lp = |tape: &mut Tape<'a>, s: &str| tape.param(store, &model.layer_name(l, s));
        let linear = |tape: &mut Tape<'a>, x: Var, w: Var, b: Var| -> Result<Var> {
            let y = tape.matmul(x, w)?;
            tape.add_bias(y, b)
        };
        let (wq, bq) = (lp(tape, "wq")?, lp(tape, "bq")?);
        let (wk, bk) = (lp(tape, "wk")?, lp(tape, "bk")?);
        let (wv, bv) = (lp(tape, "wv")?, lp(tape, "bv")?);
        let mut q = linear(tape, x, wq, bq)?;
        let k = linear(tape, x, wk, bk)?;
        let mut v = linear(tape, x, wv, bv)?;
        if let Some(lora) = opts.adapters.lora {
            q = lora.apply(tape, l, LoraTarget::Query, x, q, opts.dropout_rng.as_deref_mut())?;
            v = lora.apply(tape, l, LoraTarget::Value, x, v, opts.dropout_rng.as_deref_mut())?;
        }
        let prefix = match opts.adapters.prefix {
            Some(pa) if !pa.is_empty() => Some(pa.layer_vars(tape, l)?),
            _ => None,
        };
        let offset = opts.adapters.prefix.map_or(0, PrefixAdapter::len);

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (qh, mut kh, mut vh) = if cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dk, dk)?,
                    tape.slice_cols(k, h * dk, dk)?,
                    tape.slice_cols(v, h * dk, dk)?,
                )
            };
            if let Some((pk, pv)) = prefix {
                let (pkh, pvh) = if cfg.n_heads == 1 {
                    (pk, pv)
                } else {
                    (tape.slice_cols(pk, h * dk, dk)?, tape.slice_cols(pv, h * dk, dk)?)
                };
                kh = tape.concat_rows(&[pkh, kh])?;
                vh = tape.concat_rows(&[pvh, vh])?;
            }
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let att = tape.causal_softmax(scores, offset)?;
            heads.push(tape.matmul(att, vh)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let (wo, bo) = (lp(tape, "wo")?, lp(tape, "bo")?);
        let attn = linear(tape, o, wo, bo)?;
        let res1 = tape.add(x, attn)?;
        let (g1, b1n) = (lp(tape, "ln1.gain")?, lp(tape, "ln1.bias")?);
        let h1 = tape.layer_norm(res1, g1, b1n)?;

        let (w1, b1) = (lp(tape, "w1")?, lp(tape, "b1")?);
        let (w2, b2) = (lp(tape, "w2")?, lp(tape, "b2")?);
        let up = linear(tape, h1, w1, b1)?;
        let act = tape.gelu(up)?;
        let mlp = linear(tape, act, w2, b2)?;
        let res2 = tape.add(h1, mlp)?;
        let (g2, b2n) = (lp(tape, "ln2.gain")?, lp(tape, "ln2.bias")?);
        x = tape.layer_norm(res2, g2, b2n)?;

        if let Some(inj) = opts.injection.as_ref().filter(|inj| inj.scale != 0.0) {
            if let Some(vec) = inj.vectors[l] {
                x = tape.inject_row(x, inj.row, vec, inj.scale)?;
            }
        }
        hidden.push(tape.gather_rows(x, &[t - 1])?);
    }
    let _ = d;

    let logits = match opts.logits {
        LogitRows::None => None,
        rows => {
            let src = if rows == LogitRows::Last { hidden[cfg.n_layers - 1] } else { x };
            Some(if cfg.tie_embeddings {
                tape.matmul_nt(src, tok_emb)?
            } else {
                let head = p(tape, model.name("lm_head"))?;
                tape.matmul(src, head)?
            })
        }
    };
    Ok(TapeTrace {
        hidden,
        output: x,
        logits,
    })
}

fn hook_injection(tape: &mut Tape<'_>, model: &TransformerModel, hook: &InjectionHook, row: usize) -> Result<TapeInjection> {
    hook.validate(&model.config)?;
    let vectors = (0..model.config.n_layers)
        .map(|l| {
            hook.active(l)
                .map(|v| tape.constant(Tensor::from_parts(vec![v.len()], v.clone())))
        })
        .collect();
    Ok(TapeInjection {
        vectors,
        scale: hook.lambda,
        row,
    })
}

/// Forward pass with optional steering hook and adapters (eval mode).
pub fn forward_adapted(
    model: &TransformerModel,
    tokens: &[usize],
    hook: Option<&InjectionHook>,
    adapters: Adapters<'_>,
) -> Result<ForwardTrace> {
    forward_at(model, tokens, hook, adapters, tokens.len().saturating_sub(1))
}

fn forward_at(
    model: &TransformerModel,
    tokens: &[usize],
    hook: Option<&InjectionHook>,
    adapters: Adapters<'_>,
    row: usize,
) -> Result<ForwardTrace> {
    check_tokens(&model.config, tokens)?;
    let mut tape = Tape::new();
    let injection = hook.map(|h| hook_injection(&mut tape, model, h, row)).transpose()?;
    let mut opts = TapeForward {
        injection,
        adapters,
        dropout_rng: None,
        logits: LogitRows::All,
    };
    let trace = forward_tape(&mut tape, model, tokens, &mut opts)?;
    Ok(ForwardTrace {
        hidden: trace.hidden.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
        logits: tape.value(trace.logits.expect("requested")).clone(),
    })
}

pub fn forward(model: &TransformerModel, tokens: &[usize], hook: Option<&InjectionHook>) -> Result<ForwardTrace> {
    forward_adapted(model, tokens, hook, Adapters::none())
}

/// Last-token hidden state at every layer of an unsteered pass.
pub fn extract_task_vector(model: &TransformerModel, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
    if tokens.is_empty() {
        return Err(Error::contract("task vector extraction needs a non-empty prompt"));
    }
    Ok(forward(model, tokens, None)?.hidden)
}

/// Next-token log-probabilities at the last position.
fn last_log_probs(trace: &ForwardTrace) -> Vec<f64> {
    let (t, _) = trace.logits.dims2();
    let row = trace.logits.row(t - 1);
    let lse = crate::tensor::log_sum_exp(row);
    row.iter().map(|x| x - lse).collect()
}

/// Mean per-token log-likelihood of each option continuing `prompt`, under
/// teacher forcing. With a hook, the vector is placed according to its
/// position policy.
pub fn score_options(
    model: &TransformerModel,
    prompt: &[usize],
    options: &[Vec<usize>],
    hook: Option<&InjectionHook>,
    adapters: Adapters<'_>,
) -> Result<Vec<f64>> {
    if options.len() < 2 {
        return Err(Error::contract("option scoring needs at least two options"));
    }
    if options.iter().any(Vec::is_empty) {
        return Err(Error::contract("empty option"));
    }
    if prompt.is_empty() {
        return Err(Error::contract("empty prompt"));
    }
    let policy = hook.map_or(PositionPolicy::default(), |h| h.policy);
    let mut cache: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    let mut scores = Vec::with_capacity(options.len());
    for opt in options {
        let mut total = 0.0;
        match policy {
            PositionPolicy::CurrentLastEachStep => {
                for j in 0..opt.len() {
                    let mut seq = prompt.to_vec();
                    seq.extend_from_slice(&opt[..j]);
                    if !cache.contains_key(&seq) {
                        let trace = forward_adapted(model, &seq, hook, adapters)?;
                        cache.insert(seq.clone(), last_log_probs(&trace));
                    }
                    total += cache[&seq][opt[j]];
                }
            }
            PositionPolicy::PromptFinalOnly => {
                let mut seq = prompt.to_vec();
                seq.extend_from_slice(&opt[..opt.len() - 1]);
                let trace = forward_at(model, &seq, hook, adapters, prompt.len() - 1)?;
                for (j, &tok) in opt.iter().enumerate() {
                    let row = trace.logits.row(prompt.len() - 1 + j);
                    total += row[tok] - crate::tensor::log_sum_exp(row);
                }
            }
        }
        scores.push(total / opt.len() as f64);
    }
    Ok(scores)
}

/// Index of the best score; ties resolve to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Next-token loss over every position of `tokens`.
pub fn lm_loss<'a>(tape: &mut Tape<'a>, model: &'a TransformerModel, tokens: &[usize]) -> Result<Var> {
    if tokens.len() < 2 {
        return Err(Error::contract("language-model loss needs at least two tokens"));
    }
    let ctx = &tokens[..tokens.len() - 1];
    let trace = forward_tape(tape, model, ctx, &mut TapeForward::default())?;
    tape.cross_entropy(trace.logits.expect("requested"), &tokens[1..])
}
