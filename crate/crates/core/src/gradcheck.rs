//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::{lm_loss, ModelConfig, TransformerModel};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared on an absolute scale, so entries whose
/// true derivative vanishes do not divide finite-difference noise by ~0.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// (leaf index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of `build` with respect to each of `leaves`
/// against central differences with step `h`.
///
/// `build` receives the leaves (all marked differentiable) and must return a
/// scalar. It is re-run for every perturbed evaluation.
pub fn grad_check<F>(leaves: &[Tensor], build: F, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if leaves.is_empty() {
        return Err(Error::contract("grad_check needs at least one leaf"));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: (0, 0),
        tolerance,
    };
    let mut work: Vec<Tensor> = leaves.to_vec();
    for li in 0..leaves.len() {
        for j in 0..leaves[li].numel() {
            let orig = work[li].data()[j];
            work[li].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[li].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[li].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[li][j];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (li, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Worst relative error of one suite case over all its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Leaf shapes with the spread of their uniform entries.
type Leaves = &'static [(&'static [usize], f64)];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], spread: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| spread * rng.random_range(-1.0..1.0)).collect())
}

fn attention_head(t: &mut Tape, v: &[Var]) -> Result<Var> {
    let q = t.matmul(v[0], v[1])?;
    let k = t.matmul(v[0], v[2])?;
    let val = t.matmul(v[0], v[3])?;
    let s = t.matmul_nt(q, k)?;
    let s = t.scale(s, 1.0 / 3f64.sqrt())?;
    let a = t.causal_softmax(s, 0)?;
    t.matmul(a, val)
}

const OP_CASES: &[(&str, Leaves, Build)] = &[
    ("matmul", &[(&[3, 4], 1.0), (&[4, 5], 1.0)], |t, v| t.matmul(v[0], v[1])),
    ("matmul_nt", &[(&[3, 4], 1.0), (&[5, 4], 1.0)], |t, v| t.matmul_nt(v[0], v[1])),
    ("matmul_shared_operand", &[(&[4, 4], 1.0)], |t, v| t.matmul(v[0], v[0])),
    ("add", &[(&[3, 4], 1.0), (&[3, 4], 1.0)], |t, v| t.add(v[0], v[1])),
    ("add_bias", &[(&[3, 4], 1.0), (&[4], 1.0)], |t, v| t.add_bias(v[0], v[1])),
    ("mul", &[(&[3, 4], 1.0), (&[3, 4], 1.0)], |t, v| t.mul(v[0], v[1])),
    ("scale", &[(&[2, 5], 1.0)], |t, v| t.scale(v[0], -1.7)),
    ("gelu", &[(&[4, 6], 3.0)], |t, v| t.gelu(v[0])),
    ("sum", &[(&[3, 3], 1.0)], |t, v| t.sum(v[0])),
    ("reshape", &[(&[2, 6], 1.0)], |t, v| t.reshape(v[0], &[3, 4])),
    ("softmax_rows", &[(&[3, 5], 4.0)], |t, v| t.softmax_rows(v[0])),
    ("causal_softmax", &[(&[4, 4], 4.0)], |t, v| t.causal_softmax(v[0], 0)),
    ("causal_softmax_offset", &[(&[3, 6], 1.0)], |t, v| t.causal_softmax(v[0], 3)),
    ("layer_norm", &[(&[3, 6], 2.0), (&[6], 1.0), (&[6], 1.0)], |t, v| t.layer_norm(v[0], v[1], v[2])),
    ("cross_entropy", &[(&[4, 7], 3.0)], |t, v| t.cross_entropy(v[0], &[0, 6, 3, 3])),
    ("embedding", &[(&[6, 4], 1.0)], |t, v| t.embedding(v[0], &[1, 4, 1, 0, 5])),
    ("gather_rows", &[(&[5, 3], 1.0)], |t, v| t.gather_rows(v[0], &[4, 0, 4])),
    ("slice_cols", &[(&[3, 7], 1.0)], |t, v| t.slice_cols(v[0], 2, 3)),
    ("concat_cols", &[(&[3, 2], 1.0), (&[3, 4], 1.0)], |t, v| t.concat_cols(&[v[0], v[1], v[0]])),
    ("concat_rows", &[(&[2, 3], 1.0), (&[1, 3], 1.0)], |t, v| t.concat_rows(&[v[1], v[0]])),
    ("inject_row", &[(&[4, 5], 1.0), (&[5], 1.0)], |t, v| t.inject_row(v[0], 2, v[1], 0.3)),
    ("attention_head", &[(&[4, 6], 1.0), (&[6, 3], 1.0), (&[6, 3], 1.0), (&[6, 3], 1.0)], attention_head),
];

/// Every differentiable tape op, each over `seeds` random instances.
/// Non-scalar outputs are reduced by a fixed random weighting so every
/// output entry carries a distinct upstream gradient.
pub fn verify_ops(seeds: u64, tolerance: f64) -> Result<Vec<SuiteEntry>> {
    OP_CASES
        .iter()
        .map(|&(name, leaves, build)| {
            let mut worst = 0.0f64;
            let mut passed = true;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let tensors: Vec<Tensor> = leaves.iter().map(|(s, c)| uniform(&mut rng, s, *c)).collect();
                let r = grad_check(
                    &tensors,
                    |t, v| {
                        let out = build(t, v)?;
                        if t.value(out).numel() == 1 {
                            return Ok(out);
                        }
                        let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
                        let w = uniform(&mut wr, t.shape(out), 1.0);
                        let w = t.constant(w);
                        let p = t.mul(out, w)?;
                        t.sum(p)
                    },
                    DEFAULT_STEP,
                    tolerance,
                )?;
                worst = worst.max(r.max_rel_err);
                passed &= r.passed();
            }
            Ok(SuiteEntry {
                name: name.into(),
                seeds,
                max_rel_err: worst,
                passed,
            })
        })
        .collect()
}

/// Central differences over every trainable entry of `store`, against
/// `analytic` gradients keyed by parameter name. Returns the worst relative
/// error.
pub fn check_store_grads<S>(
    state: &mut S,
    stores: impl Fn(&mut S) -> Vec<&mut ParamStore>,
    loss: impl Fn(&S) -> Result<f64>,
    analytic: &[(String, Vec<f64>)],
) -> Result<f64> {
    let h = DEFAULT_STEP;
    let entries: Vec<(usize, String, usize)> = stores(state)
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.iter()
                .filter(|(_, t)| t.requires_grad)
                .map(|(n, t)| (si, n.to_string(), t.numel()))
                .collect::<Vec<_>>()
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::contract("no trainable parameters to check"));
    }
    let mut worst = 0.0f64;
    for (si, name, n) in entries {
        let g = &analytic
            .iter()
            .find(|(k, _)| *k == name)
            .ok_or_else(|| Error::contract(format!("no analytic gradient for {name}")))?
            .1;
        if g.len() != n {
            return Err(Error::contract(format!("gradient of {name} has {} entries, parameter has {n}", g.len())));
        }
        for (j, &a) in g.iter().enumerate() {
            let nudge = |state: &mut S, d: f64| {
                let mut ss = stores(state);
                ss[si].get_mut(&name).expect("listed").data_mut()[j] += d;
            };
            nudge(state, h);
            let fp = loss(state)?;
            nudge(state, -2.0 * h);
            let fm = loss(state)?;
            nudge(state, h);
            worst = worst.max(relative_error(a, (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}

/// Language-model loss of a 2-layer transformer, every parameter checked,
/// with weights jittered off the symmetric initialization.
pub fn verify_transformer(seeds: u64, tolerance: f64) -> Result<SuiteEntry> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        vocab_size: 13,
        max_seq_len: 10,
        tie_embeddings: true,
    };
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut model = TransformerModel::init(cfg.clone(), "m", seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for (_, t) in model.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
        }
        let tokens: Vec<usize> = (0..7).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let grads = {
            let mut tape = Tape::new();
            let l = lm_loss(&mut tape, &model, &tokens)?;
            tape.backward(l)?;
            tape.param_grads()
        };
        let f = |m: &TransformerModel| {
            let mut t = Tape::new();
            let l = lm_loss(&mut t, m, &tokens)?;
            Ok(t.value(l).data()[0])
        };
        worst = worst.max(check_store_grads(&mut model, |m| vec![&mut m.params], f, &grads)?);
    }
    Ok(SuiteEntry {
        name: "transformer_2_layer".into(),
        seeds,
        max_rel_err: worst,
        passed: worst <= tolerance,
    })
}
