//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node whose inputs are earlier nodes, so the node vector is already in
//! topological order and the backward pass is a single reverse sweep.
//! Parameter leaves borrow their tensors from a [`ParamStore`], which keeps the
//! frozen backbone zero-copy and lets gradients be routed back by name.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, layer_norm_rows, log_sum_exp, softmax_in_place, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Gelu { a: Var },
    Softmax { a: Var, causal_offset: Option<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    InjectRow { h: Var, row: usize, v: Var, scale: f64 },
    Sum { a: Var },
    Reshape { a: Var },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub type NamedGrads = Vec<(String, Vec<f64>)>;

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<String, Var>,
    backward_done: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Leaf owning `t`; differentiable when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push_unchecked(Cow::Owned(t), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(Cow::Owned(t), Op::Leaf, false)
    }

    /// Leaf borrowing the named entry of `store`. Repeated requests for the
    /// same name return the same node, so tied weights accumulate one gradient.
    pub fn param(&mut self, store: &'a ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        let v = self.push_unchecked(Cow::Borrowed(t), Op::Leaf, t.requires_grad);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every differentiable parameter leaf, by name.
    pub fn param_grads(&self) -> NamedGrads {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .filter_map(|(name, v)| self.grads[v.0].clone().map(|g| (name.clone(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn push_unchecked(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.backward_done {
            return Err(Error::contract("tape already differentiated; start a new forward pass"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract(format!("non-finite values produced by {op:?}")));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant subgraphs never need their backward bookkeeping.
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_unchecked(Cow::Owned(Tensor::from_parts(shape, data)), op, rg))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ---- operations --------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(false, false, m, k, n, self.data(a), self.data(b), &mut out, 0.0);
        self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: false }, &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(false, true, m, k, n, self.data(a), self.data(b), &mut out, 0.0);
        self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, &[a, b])
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        if self.value(bias).numel() != n {
            return Err(self.shape_err("add_bias", a, bias));
        }
        let b = self.data(bias);
        let out = self
            .data(a)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::AddBias { a, bias }, &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, c }, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a }, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        self.push(self.shape(a).to_vec(), out, Op::Softmax { a, causal_offset: None }, &[a])
    }

    /// Row-wise softmax where row `i` only sees columns `< offset + i + 1`;
    /// masked entries are exactly zero. `offset` counts always-visible leading
    /// columns (prefix slots).
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if offset + r > c {
            return Err(Error::contract(format!(
                "causal softmax needs {} columns, got {c}",
                offset + r
            )));
        }
        let mut out = vec![0.0; r * c];
        let src = self.data(a);
        for i in 0..r {
            let vis = offset + i + 1;
            let row = &mut out[i * c..i * c + vis];
            row.copy_from_slice(&src[i * c..i * c + vis]);
            softmax_in_place(row);
        }
        self.push(
            self.shape(a).to_vec(),
            out,
            Op::Softmax {
                a,
                causal_offset: Some(offset),
            },
            &[a],
        )
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let n = self.value(x).numel();
        let mut out = vec![0.0; n];
        let mut stats = vec![(0.0, 0.0); n / d];
        layer_norm_rows(self.data(x), d, self.data(gain), self.data(bias), &mut out, &mut stats);
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gain, bias, stats },
            &[x, gain, bias],
        )
    }

    /// Row lookup `table[ids[t]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_impl(table, ids, "embedding", true)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.gather_impl(a, rows, "gather_rows", false)
    }

    fn gather_impl(&mut self, a: Var, rows: &[usize], op: &'static str, embed: bool) -> Result<Var> {
        let (r, c) = self.dims(a);
        if rows.is_empty() {
            return Err(Error::contract(format!("{op} needs at least one row")));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index { op, index: i, bound: r });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let op = if embed {
            Op::Embedding {
                table: a,
                ids: rows.to_vec(),
            }
        } else {
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            }
        };
        self.push(vec![rows.len(), c], out, op, &[a])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, v) = self.dims(logits);
        if targets.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let src = self.data(logits);
        let mut probs = src.to_vec();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = &src[i * v..(i + 1) * v];
            total += log_sum_exp(row) - row[t];
            softmax_in_place(&mut probs[i * v..(i + 1) * v]);
        }
        self.push(
            vec![1],
            vec![total / b as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c || len == 0 {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let src = self.data(a);
        let out = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        self.push(vec![r, len], out, Op::SliceCols { a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (r, _) = self.dims(parts[0]);
        let mut total = 0;
        for &p in parts {
            if self.dims(p).0 != r {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            total += self.dims(p).1;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            vec![r, total],
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, c) = self.dims(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = self.dims(p);
            if c2 != c {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        self.push(
            vec![rows, c],
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// Copy of `h` with `scale · v` added to row `row`.
    pub fn inject_row(&mut self, h: Var, row: usize, v: Var, scale: f64) -> Result<Var> {
        let (r, c) = self.dims(h);
        if row >= r {
            return Err(Error::Index {
                op: "inject_row",
                index: row,
                bound: r,
            });
        }
        if self.value(v).numel() != c {
            return Err(self.shape_err("inject_row", h, v));
        }
        let mut out = self.data(h).to_vec();
        for (o, x) in out[row * c..(row + 1) * c].iter_mut().zip(self.data(v)) {
            *o += scale * x;
        }
        self.push(self.shape(h).to_vec(), out, Op::InjectRow { h, row, v, scale }, &[h, v])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.data(a).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape { a }, &[a])
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every differentiable leaf on the
    /// tape ends up with a gradient (zero when disconnected from `loss`).
    /// A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward already ran on this tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            self.fill_leaf_grads();
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        self.fill_leaf_grads();
        Ok(())
    }

    fn fill_leaf_grads(&mut self) {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
    }

    fn backprop_node(&mut self, i: usize, gout: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(g);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = val(*a).dims2();
                let n = out.dims2().1;
                if wants(*a) {
                    // dA = dO · op(B)ᵀ
                    acc(*a, &mut |ga| gemm(false, !trans_b, m, n, k, gout, val(*b).data(), ga, 1.0));
                }
                if wants(*b) {
                    if *trans_b {
                        // B is n×k: dB = dOᵀ · A
                        acc(*b, &mut |gb| gemm(true, false, n, m, k, gout, val(*a).data(), gb, 1.0));
                    } else {
                        // B is k×n: dB = Aᵀ · dO
                        acc(*b, &mut |gb| gemm(true, false, k, m, n, val(*a).data(), gout, gb, 1.0));
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    acc(v, &mut |g| add_into(g, gout));
                }
            }
            Op::AddBias { a, bias } => {
                acc(*a, &mut |g| add_into(g, gout));
                let n = val(*bias).numel();
                acc(*bias, &mut |g| {
                    for row in gout.chunks_exact(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for ((gi, go), y) in g.iter_mut().zip(gout).zip(bv) {
                        *gi += go * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, go), x) in g.iter_mut().zip(gout).zip(av) {
                        *gi += go * x;
                    }
                });
            }
            Op::Scale { a, c } => {
                acc(*a, &mut |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += c * go;
                    }
                });
            }
            Op::Gelu { a } => {
                let x = val(*a).data();
                acc(*a, &mut |g| {
                    for ((gi, go), &xi) in g.iter_mut().zip(gout).zip(x) {
                        *gi += go * gelu_grad(xi);
                    }
                });
            }
            Op::Softmax { a, causal_offset } => {
                let (r, c) = out.dims2();
                let y = out.data();
                acc(*a, &mut |g| {
                    for row in 0..r {
                        let vis = causal_offset.map_or(c, |o| o + row + 1);
                        let base = row * c;
                        let dot: f64 = (0..vis).map(|j| gout[base + j] * y[base + j]).sum();
                        for j in 0..vis {
                            g[base + j] += y[base + j] * (gout[base + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let d = val(*x).last_dim();
                let xs = val(*x).data();
                let gs = val(*gain).data();
                let xhat = |r: usize, j: usize| (xs[r * d + j] - stats[r].0) * stats[r].1;
                if wants(*x) {
                    acc(*x, &mut |g| {
                        for (r, &(_, rstd)) in stats.iter().enumerate() {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let dxh = gout[r * d + j] * gs[j];
                                m1 += dxh;
                                m2 += dxh * xhat(r, j);
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for j in 0..d {
                                let dxh = gout[r * d + j] * gs[j];
                                g[r * d + j] += rstd * (dxh - m1 - xhat(r, j) * m2);
                            }
                        }
                    });
                }
                acc(*gain, &mut |g| {
                    for r in 0..stats.len() {
                        for j in 0..d {
                            g[j] += gout[r * d + j] * xhat(r, j);
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for row in gout.chunks_exact(d) {
                        add_into(g, row);
                    }
                });
            }
            Op::Embedding { table: a, ids: rows } | Op::GatherRows { a, rows } => {
                let c = val(*a).dims2().1;
                acc(*a, &mut |g| {
                    for (t, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * c..(r + 1) * c], &gout[t * c..(t + 1) * c]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (b, v) = val(*logits).dims2();
                let s = gout[0] / b as f64;
                acc(*logits, &mut |g| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            g[i * v + j] += s * (probs[i * v + j] - ind);
                        }
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let c = val(*a).dims2().1;
                let (r, len) = out.dims2();
                acc(*a, &mut |g| {
                    for i in 0..r {
                        add_into(&mut g[i * c + start..i * c + start + len], &gout[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let (r, total) = out.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).dims2().1;
                    acc(p, &mut |g| {
                        for i in 0..r {
                            add_into(&mut g[i * w..(i + 1) * w], &gout[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    acc(p, &mut |g| add_into(g, &gout[off..off + n]));
                    off += n;
                }
            }
            Op::InjectRow { h, row, v, scale } => {
                acc(*h, &mut |g| add_into(g, gout));
                let c = out.dims2().1;
                acc(*v, &mut |g| {
                    for (gi, go) in g.iter_mut().zip(&gout[row * c..(row + 1) * c]) {
                        *gi += scale * go;
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gout[0]));
            }
            Op::Reshape { a } => {
                acc(*a, &mut |g| add_into(g, gout));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
