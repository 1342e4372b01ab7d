//! Constructive conversions between last-token additive steering and LoRA
//! updates, and the bilinear term expansion of linear attention under a
//! steered key/value/query row.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Threshold below which `‖x‖` counts as zero.
pub fn default_tol(d: usize) -> f64 {
    1e-10 * (d as f64).sqrt()
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm().max(a.norm());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).norm() / denom
    }
}

fn check_shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize), ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            lhs: vec![lhs.0, lhs.1],
            rhs: vec![rhs.0, rhs.1],
        })
    }
}

/// `x⁺ = x / ‖x‖²`, the pseudoinverse of the row `xᵀ`.
pub fn row_pseudoinverse(x: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let n = x.norm();
    if n <= tol {
        return Err(Error::Degenerate(format!(
            "pseudoinverse needs a nonzero row (‖x‖ = {n:e} ≤ tol {tol:e})"
        )));
    }
    Ok(x / (n * n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    /// `d_l × r`
    pub w_down: DMatrix<f64>,
    /// `r × d_l`
    pub w_up: DMatrix<f64>,
    pub s: f64,
}

impl LoraFactors {
    pub fn new(w_down: DMatrix<f64>, w_up: DMatrix<f64>, s: f64) -> Result<Self> {
        check_shape(
            "lora factors",
            w_down.shape(),
            w_up.shape(),
            w_down.ncols() == w_up.nrows() && w_down.ncols() >= 1,
        )?;
        Ok(Self { w_down, w_up, s })
    }

    pub fn rank(&self) -> usize {
        self.w_down.ncols()
    }

    /// `s · xᵀ W_down W_up`.
    pub fn increment(&self, x: &DVector<f64>) -> Result<RowDVector<f64>> {
        check_shape("lora increment", (x.len(), 1), self.w_down.shape(), x.len() == self.w_down.nrows())?;
        Ok((x.transpose() * &self.w_down * &self.w_up) * self.s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtvFactors {
    pub lambda: f64,
    /// Length `d_s`.
    pub v: DVector<f64>,
    /// `d_s × d_l`
    pub a: DMatrix<f64>,
}

impl AtvFactors {
    /// `λ · vᵀ A`.
    pub fn increment(&self) -> Result<RowDVector<f64>> {
        check_shape("atv increment", (self.v.len(), 1), self.a.shape(), self.v.len() == self.a.nrows())?;
        Ok((self.v.transpose() * &self.a) * self.lambda)
    }
}

/// Thin SVD of a single row `r = u Σ v_rᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSvd {
    /// `1 × k`
    pub u: DMatrix<f64>,
    /// `k × k`, at most one nonzero.
    pub sigma: DMatrix<f64>,
    /// `k × k` orthonormal; first column is `r / ‖r‖`.
    pub v_r: DMatrix<f64>,
}

impl RowSvd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * &self.sigma * self.v_r.transpose()
    }
}

/// Closed form: `σ = ‖r‖`, right singular vector `r/‖r‖`, completed to an
/// orthonormal basis by Gram–Schmidt over the standard basis.
pub fn row_svd(r: &RowDVector<f64>) -> RowSvd {
    let k = r.len();
    let norm = r.norm();
    let mut u = DMatrix::zeros(1, k);
    u[(0, 0)] = 1.0;
    let mut sigma = DMatrix::zeros(k, k);
    if norm == 0.0 {
        return RowSvd {
            u,
            sigma,
            v_r: DMatrix::identity(k, k),
        };
    }
    sigma[(0, 0)] = norm;
    let mut basis: Vec<DVector<f64>> = vec![r.transpose() / norm];
    for i in 0..k {
        if basis.len() == k {
            break;
        }
        let mut e = DVector::zeros(k);
        e[i] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&e);
                e -= b * proj;
            }
        }
        let n = e.norm();
        if n > 1e-8 {
            basis.push(e / n);
        }
    }
    RowSvd {
        u,
        sigma,
        v_r: DMatrix::from_columns(&basis),
    }
}

/// LoRA factors reproducing the steering increment `λ vᵀ A` at input `x`:
/// `W_down = x⁺ (λ v)ᵀ`, `W_up = A`, `s = 1`.
pub fn atv_to_lora(x: &DVector<f64>, v_small: &DVector<f64>, a: &DMatrix<f64>, lambda: f64, tol: f64) -> Result<LoraFactors> {
    check_shape("atv_to_lora", (v_small.len(), 1), a.shape(), v_small.len() == a.nrows())?;
    check_shape("atv_to_lora", (x.len(), 1), a.shape(), x.len() == a.ncols())?;
    let x_pinv = row_pseudoinverse(x, tol)?;
    let w_down = &x_pinv * (v_small * lambda).transpose();
    LoraFactors::new(w_down, a.clone(), 1.0)
}

/// Steering factors reproducing the LoRA increment at `x`. With
/// `rowvec = s xᵀ W_down = u Σ v_rᵀ`: `λ = σ`, `v = rowvec / λ`,
/// `A = v_r v_rᵀ W_up`. A zero `rowvec` yields `λ = 0`, `v = e₁`, `A = W_up`.
pub fn lora_to_atv(x: &DVector<f64>, factors: &LoraFactors) -> Result<AtvFactors> {
    check_shape("lora_to_atv", (x.len(), 1), factors.w_down.shape(), x.len() == factors.w_down.nrows())?;
    let rowvec: RowDVector<f64> = (x.transpose() * &factors.w_down) * factors.s;
    let svd = row_svd(&rowvec);
    let lambda = svd.sigma[(0, 0)];
    let a = &svd.v_r * svd.v_r.transpose() * &factors.w_up;
    let v = if lambda == 0.0 {
        let mut e = DVector::zeros(rowvec.len());
        e[0] = 1.0;
        e
    } else {
        rowvec.transpose() / lambda
    };
    Ok(AtvFactors { lambda, v, a })
}

/// `Q Kᵀ V`.
pub fn linear_attn(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_shape("linear_attn", q.shape(), k.shape(), q.ncols() == k.ncols())?;
    check_shape("linear_attn", k.shape(), v.shape(), k.nrows() == v.nrows())?;
    Ok(q * k.transpose() * v)
}

/// `x W_q P_kᵀ P_v + x W_q (C W_k)ᵀ C W_v`.
pub fn prefix_linear(
    x: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p_k: &DMatrix<f64>,
    p_v: &DMatrix<f64>,
    w_q: &DMatrix<f64>,
    w_k: &DMatrix<f64>,
    w_v: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_projections(x, c, w_q, w_k, w_v)?;
    check_shape("prefix_linear", p_k.shape(), p_v.shape(), p_k.nrows() == p_v.nrows())?;
    check_shape("prefix_linear", p_k.shape(), w_k.shape(), p_k.ncols() == w_k.ncols())?;
    check_shape("prefix_linear", p_v.shape(), w_v.shape(), p_v.ncols() == w_v.ncols())?;
    let q = x * w_q;
    let prefix = &q * p_k.transpose() * p_v;
    let content = &q * (c * w_k).transpose() * (c * w_v);
    Ok(prefix + content)
}

fn check_projections(
    x: &DMatrix<f64>,
    c: &DMatrix<f64>,
    w_q: &DMatrix<f64>,
    w_k: &DMatrix<f64>,
    w_v: &DMatrix<f64>,
) -> Result<()> {
    check_shape("projection", x.shape(), w_q.shape(), x.ncols() == w_q.nrows())?;
    check_shape("projection", c.shape(), w_k.shape(), c.ncols() == w_k.nrows())?;
    check_shape("projection", c.shape(), w_v.shape(), c.ncols() == w_v.nrows())?;
    check_shape("projection", w_q.shape(), w_k.shape(), w_q.ncols() == w_k.ncols())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermDecomposition {
    /// `T1..T8`, each `T × d_v`.
    pub terms: [DMatrix<f64>; 8],
    /// `T3 + … + T8`.
    pub delta_cross: DMatrix<f64>,
}

impl TermDecomposition {
    pub fn total(&self) -> DMatrix<f64> {
        let mut s = self.terms[0].clone();
        for t in &self.terms[1..] {
            s += t;
        }
        s
    }

    /// Sum of all terms except `skip`.
    pub fn total_without(&self, skip: usize) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.terms[0].nrows(), self.terms[0].ncols());
        for (i, t) in self.terms.iter().enumerate() {
            if i != skip {
                s += t;
            }
        }
        s
    }
}

/// The primed steering matrices `(P'_q, P'_k, P'_v)` for vector `v` added
/// to the last query row and the last context row.
pub fn primed(
    t: usize,
    m: usize,
    v: &DVector<f64>,
    w_q: &DMatrix<f64>,
    w_k: &DMatrix<f64>,
    w_v: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let last_row = |rows: usize| {
        let mut e = DMatrix::zeros(rows, v.len());
        if rows > 0 {
            e.row_mut(rows - 1).copy_from(&v.transpose());
        }
        e
    };
    let (et, em) = (last_row(t), last_row(m));
    (&et * w_q, &em * w_k, &em * w_v)
}

/// Expands `((x + e_T vᵀ)W_q)((C + e_m vᵀ)W_k)ᵀ((C + e_m vᵀ)W_v)` into its
/// eight bilinear terms.
pub fn decompose_atv_attention(
    x: &DMatrix<f64>,
    c: &DMatrix<f64>,
    v: &DVector<f64>,
    w_q: &DMatrix<f64>,
    w_k: &DMatrix<f64>,
    w_v: &DMatrix<f64>,
) -> Result<TermDecomposition> {
    check_projections(x, c, w_q, w_k, w_v)?;
    check_shape("steering vector", (v.len(), 1), x.shape(), v.len() == x.ncols())?;
    if x.nrows() == 0 || c.nrows() == 0 {
        return Err(Error::contract("decomposition needs at least one query and one context row"));
    }
    let (pq, pk, pv) = primed(x.nrows(), c.nrows(), v, w_q, w_k, w_v);
    let q = x * w_q;
    let ck = c * w_k;
    let cv = c * w_v;
    let terms = [
        &q * ck.transpose() * &cv,
        &q * pk.transpose() * &pv,
        &q * pk.transpose() * &cv,
        &q * ck.transpose() * &pv,
        &pq * ck.transpose() * &cv,
        &pq * pk.transpose() * &cv,
        &pq * ck.transpose() * &pv,
        &pq * pk.transpose() * &pv,
    ];
    let mut delta_cross = terms[2].clone();
    for t in &terms[3..] {
        delta_cross += t;
    }
    Ok(TermDecomposition { terms, delta_cross })
}

/// Singular values in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// True when `σ_{r+1} ≤ rel · σ_1`.
pub fn rank_at_most(m: &DMatrix<f64>, r: usize, rel: f64) -> bool {
    let s = singular_values(m);
    s.len() <= r || s[0] == 0.0 || s[r] <= rel * s[0]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub trial: usize,
    pub check: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub suite: String,
    pub seed: u64,
    pub trials: usize,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub failures: usize,
    pub records: Vec<CheckRecord>,
}

impl VerificationReport {
    fn new(suite: &str, seed: u64, trials: usize, tolerance: f64) -> Self {
        Self {
            suite: suite.into(),
            seed,
            trials,
            tolerance,
            max_rel_err: 0.0,
            failures: 0,
            records: Vec::new(),
        }
    }

    /// Records an error-measuring check; it contributes to `max_rel_err`.
    fn measure(&mut self, trial: usize, check: &str, err: f64, tol: f64) {
        self.max_rel_err = self.max_rel_err.max(err);
        self.flag(trial, check, err, err <= tol);
    }

    fn flag(&mut self, trial: usize, check: &str, err: f64, pass: bool) {
        if !pass {
            self.failures += 1;
        }
        self.records.push(CheckRecord {
            trial,
            check: check.into(),
            max_rel_err: err,
            pass,
        });
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn failing(&self) -> impl Iterator<Item = &CheckRecord> {
        self.records.iter().filter(|r| !r.pass)
    }
}

/// Seed of trial `i` of a run seeded with `seed`; a single trial can be
/// replayed by running one trial with this seed.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_add((trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn gauss_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn gauss_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn row_rel_err(a: &RowDVector<f64>, b: &RowDVector<f64>) -> f64 {
    let denom = a.norm().max(b.norm());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).norm() / denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Theorem1Dims {
    pub d_large: usize,
    pub d_small: usize,
}

impl Default for Theorem1Dims {
    fn default() -> Self {
        Self { d_large: 64, d_small: 8 }
    }
}

/// Random-instance verification of both conversions at rank `r = d_s`,
/// with round trip, unit-norm, scale, rank-bound and zero-input checks.
pub fn verify_theorem1(trials: usize, seed: u64, dims: Theorem1Dims, tolerance: f64) -> Result<VerificationReport> {
    let Theorem1Dims { d_large: dl, d_small: ds } = dims;
    if ds == 0 || ds > dl {
        return Err(Error::config("theory.d_small", format!("need 1 ≤ d_s ≤ d_l, got d_s={ds}, d_l={dl}")));
    }
    let tol = default_tol(dl);
    let lambda = 0.001;
    let mut report = VerificationReport::new("theorem1", seed, trials, tolerance);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, trial));
        let x = gauss_vector(&mut rng, dl);
        let v = gauss_vector(&mut rng, ds);
        let a = gauss_matrix(&mut rng, ds, dl);
        let atv = AtvFactors { lambda, v: v.clone(), a: a.clone() };
        let target = atv.increment()?;

        let lora = atv_to_lora(&x, &v, &a, lambda, tol)?;
        report.measure(trial, "atv_to_lora", row_rel_err(&lora.increment(&x)?, &target), tolerance);

        let c = 0.5 + 3.0 * rand::Rng::random::<f64>(&mut rng);
        let xc = &x * c;
        let scaled = atv_to_lora(&xc, &v, &a, lambda, tol)?;
        report.measure(trial, "atv_to_lora_scaled_input", row_rel_err(&scaled.increment(&xc)?, &target), tolerance);

        let back = lora_to_atv(&x, &lora)?;
        report.measure(trial, "round_trip", row_rel_err(&back.increment()?, &target), tolerance);

        let factors = LoraFactors::new(gauss_matrix(&mut rng, dl, ds), gauss_matrix(&mut rng, ds, dl), 4.0)?;
        let lora_inc = factors.increment(&x)?;
        let conv = lora_to_atv(&x, &factors)?;
        report.measure(trial, "lora_to_atv", row_rel_err(&conv.increment()?, &lora_inc), tolerance);
        report.measure(trial, "unit_norm", (conv.v.norm() - 1.0).abs(), 1e-12);

        // Increments under one fixed set of factors, stacked over more
        // inputs than the rank budget, span at most d_s dimensions.
        let n = 2 * ds + 2;
        let xs = gauss_matrix(&mut rng, n, dl);
        let vs = gauss_matrix(&mut rng, n, ds);
        let lora_stack = (&xs * &factors.w_down * &factors.w_up) * factors.s;
        let atv_stack = (&vs * &a) * lambda;
        let ratio = |m: &DMatrix<f64>| {
            let s = singular_values(m);
            s[ds] / s[0]
        };
        let worst = ratio(&lora_stack).max(ratio(&atv_stack));
        report.flag(trial, "rank_bound", worst, worst <= 1e-10);

        if trial == 0 {
            let zero = DVector::zeros(dl);
            let rejected = matches!(atv_to_lora(&zero, &v, &a, lambda, tol), Err(Error::Degenerate(_)));
            report.flag(trial, "zero_input_rejected", 0.0, rejected);
            let null = LoraFactors::new(DMatrix::zeros(dl, ds), factors.w_up.clone(), 4.0)?;
            let z = lora_to_atv(&x, &null)?;
            let ok = z.lambda == 0.0 && z.increment()?.iter().all(|&e| e == 0.0);
            report.flag(trial, "zero_rowvec_convention", 0.0, ok);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Theorem2Dims {
    pub context: usize,
    pub queries: usize,
    pub d_large: usize,
}

impl Default for Theorem2Dims {
    fn default() -> Self {
        Self {
            context: 6,
            queries: 4,
            d_large: 16,
        }
    }
}

/// Random-instance verification of the eight-term expansion, its prefix
/// subset and a nonvanishing cross-term witness; trial 0 also checks the
/// `v = 0` collapse.
pub fn verify_theorem2(trials: usize, seed: u64, dims: Theorem2Dims, tolerance: f64) -> Result<VerificationReport> {
    let Theorem2Dims {
        context: m,
        queries: t,
        d_large: d,
    } = dims;
    if m == 0 || t == 0 || d == 0 {
        return Err(Error::config("theory", "context, queries and d_large must be positive"));
    }
    let mut report = VerificationReport::new("theorem2", seed, trials, tolerance);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, trial));
        let x = gauss_matrix(&mut rng, t, d);
        let c = gauss_matrix(&mut rng, m, d);
        let v = gauss_vector(&mut rng, d);
        let w_q = gauss_matrix(&mut rng, d, d);
        let w_k = gauss_matrix(&mut rng, d, d);
        let w_v = gauss_matrix(&mut rng, d, d);

        let dec = decompose_atv_attention(&x, &c, &v, &w_q, &w_k, &w_v)?;
        let (pq, pk, pv) = primed(t, m, &v, &w_q, &w_k, &w_v);
        let full = linear_attn(&(&x * &w_q + &pq), &(&c * &w_k + &pk), &(&c * &w_v + &pv))?;
        report.measure(trial, "decomposition", rel_err(&dec.total(), &full), tolerance);

        let prefix = prefix_linear(&x, &c, &pk, &pv, &w_q, &w_k, &w_v)?;
        let subset = &dec.terms[0] + &dec.terms[1];
        report.measure(trial, "prefix_containment", rel_err(&subset, &prefix), 1e-12);

        let ratio = dec.delta_cross.norm() / dec.terms[0].norm();
        report.flag(trial, "cross_term_witness", ratio, ratio > 1e-6);

        let min_residual = (0..8)
            .map(|i| rel_err(&dec.total_without(i), &full))
            .fold(f64::INFINITY, f64::min);
        report.flag(trial, "leave_one_out", min_residual, min_residual > 1e-9);

        if trial == 0 {
            let zero = DVector::zeros(d);
            let z = decompose_atv_attention(&x, &c, &zero, &w_q, &w_k, &w_v)?;
            let collapsed = z.terms[1..].iter().all(|t| t.iter().all(|&e| e == 0.0))
                && z.delta_cross.iter().all(|&e| e == 0.0)
                && z.terms[0] == linear_attn(&(&x * &w_q), &(&c * &w_k), &(&c * &w_v))?;
            report.flag(trial, "zero_vector_collapse", 0.0, collapsed);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn pseudoinverse_examples() {
        let p = row_pseudoinverse(&dv(&[3.0, 4.0]), 1e-10).unwrap();
        assert!((p[0] - 0.12).abs() < 1e-15 && (p[1] - 0.16).abs() < 1e-15);
        assert_eq!(row_pseudoinverse(&dv(&[1.0, 0.0, 0.0]), 1e-10).unwrap(), dv(&[1.0, 0.0, 0.0]));
        assert!(matches!(row_pseudoinverse(&dv(&[0.0, 1e-12]), 1e-10), Err(Error::Degenerate(_))));
    }

    #[test]
    fn lora_to_atv_three_four_five() {
        // x = e1 and W_down rows chosen so that xᵀ W_down = [3, 4].
        let x = dv(&[1.0, 0.0, 0.0]);
        let w_down = DMatrix::from_row_slice(3, 2, &[3.0, 4.0, 1.0, 2.0, -1.0, 0.5]);
        let w_up = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, -1.0]);
        let f = LoraFactors::new(w_down, w_up, 1.0).unwrap();
        let a = lora_to_atv(&x, &f).unwrap();
        assert!((a.lambda - 5.0).abs() < 1e-14);
        assert!((a.v[0] - 0.6).abs() < 1e-14 && (a.v[1] - 0.8).abs() < 1e-14);
        assert!(row_rel_err(&a.increment().unwrap(), &f.increment(&x).unwrap()) < 1e-14);
    }

    #[test]
    fn zero_lambda_gives_zero_down() {
        let x = dv(&[1.0, 2.0, 3.0]);
        let f = atv_to_lora(&x, &dv(&[1.0, -1.0]), &DMatrix::from_element(2, 3, 0.5), 0.0, 1e-10).unwrap();
        assert!(f.w_down.iter().all(|&w| w == 0.0));
        assert!(f.increment(&x).unwrap().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn scale_absorption() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gauss_vector(&mut rng, 6);
        let down = gauss_matrix(&mut rng, 6, 3);
        let up = gauss_matrix(&mut rng, 3, 6);
        let a = lora_to_atv(&x, &LoraFactors::new(down.clone(), up.clone(), 1.0).unwrap()).unwrap();
        let b = lora_to_atv(&x, &LoraFactors::new(down, &up / 2.0, 2.0).unwrap()).unwrap();
        assert!(row_rel_err(&a.increment().unwrap(), &b.increment().unwrap()) < 1e-14);
    }

    #[test]
    fn row_svd_zero_row() {
        let s = row_svd(&RowDVector::zeros(3));
        assert_eq!(s.reconstruct(), DMatrix::zeros(1, 3));
        assert_eq!(s.v_r, DMatrix::identity(3, 3));
    }

    #[test]
    fn linear_attention_identities() {
        let v = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = DMatrix::identity(2, 2);
        assert_eq!(linear_attn(&i, &i, &v).unwrap(), v);
        assert!(linear_attn(&i, &DMatrix::zeros(2, 3), &v).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k) = (gauss_matrix(&mut rng, 3, 4), gauss_matrix(&mut rng, 5, 4));
        let (v1, v2) = (gauss_matrix(&mut rng, 5, 2), gauss_matrix(&mut rng, 5, 2));
        let lhs = linear_attn(&q, &k, &(&v1 * 2.0 + &v2)).unwrap();
        let rhs = linear_attn(&q, &k, &v1).unwrap() * 2.0 + linear_attn(&q, &k, &v2).unwrap();
        assert!(rel_err(&lhs, &rhs) < 1e-12);
        let two_step = (&q * k.transpose()) * &v1;
        assert!(rel_err(&linear_attn(&q, &k, &v1).unwrap(), &two_step) < 1e-12);
    }

    #[test]
    fn prefix_linear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let x = gauss_matrix(&mut rng, 3, d);
        let c = gauss_matrix(&mut rng, 5, d);
        let (wq, wk, wv) = (gauss_matrix(&mut rng, d, d), gauss_matrix(&mut rng, d, d), gauss_matrix(&mut rng, d, d));
        let pk = gauss_matrix(&mut rng, 2, d);
        let pv = gauss_matrix(&mut rng, 2, d);
        let content = linear_attn(&(&x * &wq), &(&c * &wk), &(&c * &wv)).unwrap();
        let zero_p = prefix_linear(&x, &c, &DMatrix::zeros(2, d), &pv, &wq, &wk, &wv).unwrap();
        assert!(rel_err(&zero_p, &content) < 1e-15);
        let empty = DMatrix::zeros(0, d);
        let only_prefix = prefix_linear(&x, &empty, &pk, &pv, &wq, &wk, &wv).unwrap();
        assert!(rel_err(&only_prefix, &linear_attn(&(&x * &wq), &pk, &pv).unwrap()) < 1e-15);
        // Concatenated keys and values.
        let keys = DMatrix::from_rows(&pk.row_iter().chain((&c * &wk).row_iter()).collect::<Vec<_>>());
        let vals = DMatrix::from_rows(&pv.row_iter().chain((&c * &wv).row_iter()).collect::<Vec<_>>());
        let concat = linear_attn(&(&x * &wq), &keys, &vals).unwrap();
        let split = prefix_linear(&x, &c, &pk, &pv, &wq, &wk, &wv).unwrap();
        assert!(rel_err(&concat, &split) < 1e-12);
    }

    #[test]
    fn theorem1_suite_passes_and_is_deterministic() {
        let r = verify_theorem1(20, 42, Theorem1Dims::default(), 1e-8).unwrap();
        assert!(r.passed(), "{:?}", r.failing().collect::<Vec<_>>());
        assert!(r.max_rel_err <= 1e-10);
        assert!(r.records.iter().any(|c| c.check == "zero_input_rejected" && c.pass));
        assert_eq!(r, verify_theorem1(20, 42, Theorem1Dims::default(), 1e-8).unwrap());
        assert!(verify_theorem1(1, 1, Theorem1Dims { d_large: 4, d_small: 8 }, 1e-8).is_err());
    }

    #[test]
    fn theorem2_suite_passes() {
        let r = verify_theorem2(20, 42, Theorem2Dims::default(), 1e-10).unwrap();
        assert!(r.passed(), "{:?}", r.failing().collect::<Vec<_>>());
        assert!(r.records.iter().any(|c| c.check == "zero_vector_collapse" && c.pass));
    }

    proptest! {
        #[test]
        fn pseudoinverse_defining_property(xs in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
            let x = dv(&xs);
            prop_assume!(x.norm() > default_tol(xs.len()));
            let p = row_pseudoinverse(&x, default_tol(xs.len())).unwrap();
            prop_assert!((x.dot(&p) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn row_svd_reconstructs(xs in proptest::collection::vec(-5.0f64..5.0, 1..10)) {
            let r = RowDVector::from_row_slice(&xs);
            let s = row_svd(&r);
            let err = (s.reconstruct() - DMatrix::from_row_slice(1, xs.len(), &xs)).norm();
            prop_assert!(err <= 1e-10 * (1.0 + r.norm()));
            let orth = (s.v_r.transpose() * &s.v_r - DMatrix::identity(xs.len(), xs.len())).norm();
            prop_assert!(orth <= 1e-10);
            prop_assert!(s.sigma.iter().filter(|&&e| e != 0.0).count() <= 1);
        }

        #[test]
        fn round_trip_preserves_increment(seed in 0u64..1000, dl in 2usize..12, ds in 1usize..6) {
            prop_assume!(ds <= dl);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gauss_vector(&mut rng, dl);
            let v = gauss_vector(&mut rng, ds);
            let a = gauss_matrix(&mut rng, ds, dl);
            let atv = AtvFactors { lambda: 0.37, v: v.clone(), a: a.clone() };
            let lora = atv_to_lora(&x, &v, &a, 0.37, default_tol(dl)).unwrap();
            let back = lora_to_atv(&x, &lora).unwrap();
            prop_assert!(row_rel_err(&back.increment().unwrap(), &atv.increment().unwrap()) <= 1e-8);
            prop_assert!((back.v.norm() - 1.0).abs() <= 1e-12);
        }
    }
}
