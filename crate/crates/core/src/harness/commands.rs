//! The subcommands behind the `atv` binary. Each writes its artifacts into
//! an output directory and returns what it wrote for programmatic use.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::atv::{adaptive_vectors, AtvAdapter};
use crate::baselines::Baseline;
use crate::error::{Error, Result};
use crate::tasks::{tokenize, write_jsonl, Family, Split};
use crate::theory::{trial_seed, verify_theorem1, verify_theorem2, Theorem1Dims, Theorem2Dims, VerificationReport};
use crate::tensor::Tensor;
use crate::transformer::ModelConfig;

use super::config::{LayerMask, Method, RunConfig};
use super::eval::{aggregate, is_held_out_template, mean_accuracy, mean_std, EvalRow, Intervention, Prediction};
use super::run::{pretrained_backbone, run_dir, train_method, train_run, Experiment, MethodState, TrainedRun};

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains every seed of `cfg` into `{out_dir}/{method}-seed{seed}`.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let exp = Experiment::new(cfg)?;
    let mut dirs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = train_run(cfg, &exp, seed)?;
        let dir = run_dir(&cfg.out_dir, cfg.method, seed);
        run.save(&dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Held-out-template, training-template and unseen-task accuracy of one
/// method, as mean and sample std over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub seeds: usize,
    pub train_template_mean: Option<f64>,
    pub train_template_std: Option<f64>,
    pub held_out_template_mean: Option<f64>,
    pub held_out_template_std: Option<f64>,
    pub unseen_task_mean: Option<f64>,
    pub unseen_task_std: Option<f64>,
    pub mean_prompt_tokens: f64,
}

type RowFilter = fn(&EvalRow) -> bool;

fn over_seeds(rows: &[EvalRow], keep: RowFilter) -> (Option<f64>, Option<f64>) {
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    let per_seed: Vec<f64> = seeds
        .iter()
        .filter_map(|&s| mean_accuracy(rows.iter().filter(|r| r.seed == s), keep))
        .collect();
    if per_seed.is_empty() {
        return (None, None);
    }
    let (m, s) = mean_std(&per_seed);
    (Some(m), Some(s))
}

fn train_template(r: &EvalRow) -> bool {
    r.split == Split::TestSeenTemplate && !is_held_out_template(r)
}

fn held_out_template(r: &EvalRow) -> bool {
    r.split == Split::TestUnseenTemplate && is_held_out_template(r)
}

fn unseen_task(r: &EvalRow) -> bool {
    r.split == Split::UnseenTask
}

pub fn summarize(rows: &[EvalRow]) -> Vec<SummaryRow> {
    let mut by_method: BTreeMap<&str, Vec<EvalRow>> = BTreeMap::new();
    for r in rows {
        by_method.entry(&r.method).or_default().push(r.clone());
    }
    by_method
        .into_iter()
        .map(|(method, rows)| {
            let (tm, ts) = over_seeds(&rows, train_template);
            let (hm, hs) = over_seeds(&rows, held_out_template);
            let (um, us) = over_seeds(&rows, unseen_task);
            let n: usize = rows.iter().map(|r| r.n).sum();
            let tokens: f64 = rows.iter().map(|r| r.mean_prompt_tokens * r.n as f64).sum();
            SummaryRow {
                method: method.to_string(),
                seeds: rows.iter().map(|r| r.seed).collect::<BTreeSet<_>>().len(),
                train_template_mean: tm,
                train_template_std: ts,
                held_out_template_mean: hm,
                held_out_template_std: hs,
                unseen_task_mean: um,
                unseen_task_std: us,
                mean_prompt_tokens: tokens / n as f64,
            }
        })
        .collect()
}

/// Unseen-family table: prompt tokens, per-family accuracy and their
/// average, each as mean ± std, plus the chance floor.
pub fn write_unseen_report(path: &Path, predictions: &[Prediction]) -> Result<Vec<Vec<String>>> {
    let unseen: Vec<&Prediction> = predictions.iter().filter(|p| p.split == Split::UnseenTask).collect();
    let families: BTreeSet<Family> = unseen.iter().map(|p| p.family).collect();
    let methods: BTreeSet<&str> = unseen.iter().map(|p| p.method.as_str()).collect();
    let mut header = vec!["method".to_string(), "tokens_mean".into(), "tokens_std".into()];
    for f in &families {
        header.push(format!("{f}_mean"));
        header.push(format!("{f}_std"));
    }
    header.extend(["avg_mean".into(), "avg_std".into(), "chance".into()]);
    let rows = aggregate(&unseen.iter().map(|p| (*p).clone()).collect::<Vec<_>>());
    let mut table = vec![header];
    for m in methods {
        let tokens: Vec<f64> = unseen.iter().filter(|p| p.method == m).map(|p| p.prompt_tokens as f64).collect();
        let (tm, ts) = mean_std(&tokens);
        let mut line = vec![m.to_string(), format!("{tm:.4}"), format!("{ts:.4}")];
        let mine: Vec<EvalRow> = rows.iter().filter(|r| r.method == m).cloned().collect();
        let seeds: BTreeSet<u64> = mine.iter().map(|r| r.seed).collect();
        for f in &families {
            let per_seed: Vec<f64> = seeds
                .iter()
                .filter_map(|&s| mean_accuracy(mine.iter().filter(|r| r.seed == s && r.family == *f), |_| true))
                .collect();
            let (a, b) = mean_std(&per_seed);
            line.push(format!("{a:.6}"));
            line.push(format!("{b:.6}"));
        }
        let per_seed: Vec<f64> = seeds
            .iter()
            .filter_map(|&s| mean_accuracy(mine.iter().filter(|r| r.seed == s), |_| true))
            .collect();
        let (a, b) = mean_std(&per_seed);
        let chance = families.iter().map(|f| 1.0 / f.options().len() as f64).sum::<f64>() / families.len() as f64;
        line.extend([format!("{a:.6}"), format!("{b:.6}"), format!("{chance:.6}")]);
        table.push(line);
    }
    let mut w = csv::Writer::from_path(path)?;
    for line in &table {
        w.write_record(line)?;
    }
    w.flush()?;
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub predictions: Vec<Prediction>,
    pub rows: Vec<EvalRow>,
    pub summary: Vec<SummaryRow>,
}

/// Writes every report for already-computed predictions.
pub fn write_eval_reports(out: &Path, predictions: Vec<Prediction>) -> Result<EvalOutput> {
    fs::create_dir_all(out)?;
    let rows = aggregate(&predictions);
    write_csv(&out.join("eval.csv"), &rows)?;
    let mut log = BufWriter::new(File::create(out.join("predictions.jsonl"))?);
    for p in &predictions {
        serde_json::to_writer(&mut log, p)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    let summary = summarize(&rows);
    write_csv(&out.join("summary.csv"), &summary)?;
    if predictions.iter().any(|p| p.split == Split::UnseenTask) {
        write_unseen_report(&out.join("unseen_report.csv"), &predictions)?;
    }
    Ok(EvalOutput {
        predictions,
        rows,
        summary,
    })
}

/// Evaluates saved runs on `splits` in all nine renderings.
pub fn cmd_eval(run_dirs: &[PathBuf], splits: &[Split], out: &Path) -> Result<EvalOutput> {
    if run_dirs.is_empty() {
        return Err(Error::config("runs", "no run directories given"));
    }
    let mut predictions = Vec::new();
    for dir in run_dirs {
        let run = TrainedRun::load(dir)?;
        let exp = Experiment::new(&run.config)?;
        predictions.extend(run.predict(&exp, splits)?);
    }
    write_eval_reports(out, predictions)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub region: String,
    pub layers: String,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub diff_vs_all: f64,
}

const REGIONS: [LayerMask; 5] = [
    LayerMask::All,
    LayerMask::BottomThird,
    LayerMask::MiddleThird,
    LayerMask::TopThird,
    LayerMask::None,
];

fn atv_of(run: &TrainedRun) -> Result<&AtvAdapter> {
    match &run.state {
        MethodState::Atv(a) => Ok(a),
        _ => Err(Error::contract(format!("{} run is not an ATV run", run.method()))),
    }
}

/// Held-out-template accuracy of ATV runs with injection restricted to each
/// third of the layers; the last row injects nowhere.
pub fn cmd_ablate_layers(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<LayerRow>> {
    if run_dirs.is_empty() {
        return Err(Error::config("runs", "no run directories given"));
    }
    let runs: Vec<TrainedRun> = run_dirs.iter().map(|d| TrainedRun::load(d)).collect::<Result<_>>()?;
    let mut per_region: Vec<Vec<f64>> = vec![Vec::new(); REGIONS.len()];
    let mut layer_text = vec![String::new(); REGIONS.len()];
    for run in &runs {
        let base = atv_of(run)?;
        let exp = Experiment::new(&run.config)?;
        for (i, mask) in REGIONS.iter().enumerate() {
            let mut a = base.clone();
            a.layers = mask.resolve(run.large.config.n_layers)?;
            layer_text[i] = a.layers.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
            let rows = aggregate(&run.predict_with(&exp, &[Split::TestUnseenTemplate], Intervention::Atv(&a))?);
            per_region[i].push(mean_accuracy(&rows, is_held_out_template).expect("non-empty split"));
        }
    }
    let all = mean_std(&per_region[0]).0;
    let rows: Vec<LayerRow> = REGIONS
        .iter()
        .zip(per_region)
        .zip(layer_text)
        .map(|((mask, accs), layers)| {
            let (m, s) = mean_std(&accs);
            LayerRow {
                region: mask.to_string(),
                layers,
                accuracy_mean: m,
                accuracy_std: s,
                diff_vs_all: m - all,
            }
        })
        .collect();
    fs::create_dir_all(out)?;
    write_csv(&out.join("layers.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityRow {
    pub d_small: usize,
    pub generator_params: usize,
    pub trainable_params: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

/// Generator config of a capacity rung: width `d`, MLP `4d`, same depth
/// and head count.
pub fn rung_config(base: &ModelConfig, d: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        ffn_dim: 4 * d,
        ..base.clone()
    }
}

/// Trains ATV once per rung and seed from the same pretrained backbones.
pub fn cmd_ablate_capacity(cfg: &RunConfig, out: &Path) -> Result<Vec<CapacityRow>> {
    cfg.validate()?;
    let exp = Experiment::new(cfg)?;
    let backbones: Vec<_> = cfg
        .seeds
        .iter()
        .map(|&s| pretrained_backbone(cfg, &exp, s).map(|b| (s, b)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cfg.ladder.len());
    for &d in &cfg.ladder {
        let mut rung = cfg.clone();
        rung.method = Method::Atv;
        rung.generator = rung_config(&cfg.generator, d);
        rung.validate()?;
        let mut accs = Vec::new();
        let mut trainable = 0;
        for (seed, (large, pre)) in &backbones {
            let run = train_method(&rung, &exp, *seed, large.clone(), pre)?;
            trainable = atv_of(&run)?.num_trainable();
            let r = aggregate(&run.predict(&exp, &[Split::TestUnseenTemplate])?);
            accs.push(mean_accuracy(&r, is_held_out_template).expect("non-empty split"));
        }
        let (m, s) = mean_std(&accs);
        rows.push(CapacityRow {
            d_small: d,
            generator_params: rung.generator.num_params(),
            trainable_params: trainable,
            accuracy_mean: m,
            accuracy_std: s,
        });
    }
    fs::create_dir_all(out)?;
    write_csv(&out.join("capacity.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormRow {
    pub layer: usize,
    pub mean_l2: f64,
    pub std_l2: f64,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceRow {
    pub family: Family,
    pub n: usize,
    pub within_variance: f64,
}

#[derive(Debug, Clone)]
pub struct VectorExport {
    pub ids: Vec<String>,
    pub families: Vec<Family>,
    /// One flattened `L × d` vector per query.
    pub vectors: Vec<Vec<f64>>,
    pub pca: Vec<[f64; 2]>,
    pub norms: Vec<NormRow>,
    pub variance: Vec<VarianceRow>,
}

/// Mean squared distance to the family mean, accumulated relative to the
/// first member so identical vectors give exactly zero.
pub fn within_variance(vectors: &[&[f64]]) -> f64 {
    let Some(first) = vectors.first() else { return 0.0 };
    let n = vectors.len() as f64;
    let mut total = 0.0;
    for j in 0..first.len() {
        let (mut s, mut sq) = (0.0, 0.0);
        for v in vectors {
            let d = v[j] - first[j];
            s += d;
            sq += d * d;
        }
        total += (sq / n - (s / n) * (s / n)).max(0.0);
    }
    total
}

/// Projection onto the top two principal axes; each axis is signed so its
/// largest-magnitude loading is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let d = rows[0].len();
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(2);
    for k in 0..2 {
        let mut axis = vec![0.0; d];
        if let Some(&idx) = order.get(k) {
            if svd.singular_values[idx] > 0.0 {
                axis = v_t.row(idx).iter().copied().collect();
                let lead = axis.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
                if lead < 0.0 {
                    axis.iter_mut().for_each(|a| *a = -*a);
                }
            }
        }
        axes.push(axis);
    }
    (0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |axis: &[f64]| row.iter().zip(axis).map(|(a, b)| a * b).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect()
}

/// Per-query vectors of an ATV or fixed-vector run over one split: layer
/// norm profile of the injected `λ·v`, raw flattened vectors with a 2-D PCA
/// projection, and within-family variance.
pub fn cmd_export_vectors(run_dir: &Path, split: Split, out: &Path) -> Result<VectorExport> {
    let run = TrainedRun::load(run_dir)?;
    let exp = Experiment::new(&run.config)?;
    let examples = exp.splits.get(split);
    if examples.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    let n_layers = run.large.config.n_layers;
    let (lambda, layers): (f64, &BTreeSet<usize>) = match &run.state {
        MethodState::Atv(a) => (a.lambda, &a.layers),
        MethodState::Baseline(Baseline::FixedVector(_)) => (run.config.ftv_lambda, &run.layers),
        _ => {
            return Err(Error::contract(format!("{} runs have no task vectors to export", run.method())));
        }
    };
    let mut matrices: Vec<Tensor> = Vec::with_capacity(examples.len());
    for ex in examples {
        let m = match &run.state {
            MethodState::Atv(a) => adaptive_vectors(a, &tokenize(&exp.vocab, &ex.query_text()))?,
            MethodState::Baseline(Baseline::FixedVector(v)) => v
                .get(ex.family.name())
                .ok_or_else(|| Error::Data(format!("no fixed task vector for {}", ex.family)))?
                .vectors
                .clone(),
            _ => unreachable!("checked above"),
        };
        matrices.push(m);
    }
    let norms: Vec<NormRow> = (0..n_layers)
        .map(|l| {
            let vals: Vec<f64> = matrices
                .iter()
                .map(|m| if layers.contains(&l) { lambda.abs() * m.row(l).iter().map(|x| x * x).sum::<f64>().sqrt() } else { 0.0 })
                .collect();
            let (mean, std) = mean_std(&vals);
            NormRow {
                layer: l,
                mean_l2: mean,
                std_l2: std,
                method: run.method().to_string(),
            }
        })
        .collect();
    let vectors: Vec<Vec<f64>> = matrices.into_iter().map(Tensor::into_data).collect();
    let pca = pca_2d(&vectors);
    let families: Vec<Family> = examples.iter().map(|e| e.family).collect();
    let variance: Vec<VarianceRow> = families
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|&f| {
            let members: Vec<&[f64]> = vectors.iter().zip(&families).filter(|(_, g)| **g == f).map(|(v, _)| v.as_slice()).collect();
            VarianceRow {
                family: f,
                n: members.len(),
                within_variance: within_variance(&members),
            }
        })
        .collect();

    fs::create_dir_all(out)?;
    write_csv(&out.join("norms.csv"), &norms)?;
    write_csv(&out.join("variance.csv"), &variance)?;
    let mut w = csv::Writer::from_path(out.join("vectors.csv"))?;
    let dim = vectors[0].len();
    let mut header = vec!["id".to_string(), "family".into(), "pc1".into(), "pc2".into()];
    header.extend((0..dim).map(|j| format!("v{j}")));
    w.write_record(&header)?;
    for ((ex, v), p) in examples.iter().zip(&vectors).zip(&pca) {
        let mut rec = vec![ex.id.clone(), ex.family.to_string(), p[0].to_string(), p[1].to_string()];
        rec.extend(v.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(VectorExport {
        ids: examples.iter().map(|e| e.id.clone()).collect(),
        families,
        vectors,
        pca,
        norms,
        variance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailedTrial {
    pub suite: String,
    pub trial: usize,
    /// Replays the trial alone: `theory --trials 1 --seed <replay_seed>`.
    pub replay_seed: u64,
    pub check: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub passed: bool,
    pub theorem1: VerificationReport,
    pub theorem2: VerificationReport,
    pub failed: Vec<FailedTrial>,
}

pub const THEOREM1_TOL: f64 = 1e-8;
pub const THEOREM2_TOL: f64 = 1e-10;

/// Runs both verification suites; `tol` overrides both default tolerances.
pub fn cmd_theory(trials: usize, seed: u64, tol: Option<f64>, out: Option<&Path>) -> Result<TheoryReport> {
    if trials == 0 {
        return Err(Error::config("trials", "must be positive"));
    }
    if let Some(t) = tol {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::config("tol", "must be positive and finite"));
        }
    }
    let theorem1 = verify_theorem1(trials, seed, Theorem1Dims::default(), tol.unwrap_or(THEOREM1_TOL))?;
    let theorem2 = verify_theorem2(trials, seed, Theorem2Dims::default(), tol.unwrap_or(THEOREM2_TOL))?;
    let failed = [&theorem1, &theorem2]
        .into_iter()
        .flat_map(|r| {
            r.failing().map(|c| FailedTrial {
                suite: r.suite.clone(),
                trial: c.trial,
                replay_seed: trial_seed(seed, c.trial),
                check: c.check.clone(),
                max_rel_err: c.max_rel_err,
            })
        })
        .collect();
    let report = TheoryReport {
        passed: theorem1.passed() && theorem2.passed(),
        theorem1,
        theorem2,
        failed,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(File::create(dir.join("theory.json"))?);
        serde_json::to_writer_pretty(&mut f, &report)?;
        f.write_all(b"\n")?;
        f.flush()?;
    }
    Ok(report)
}

/// Writes the splits of `cfg` as JSON lines.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let exp = Experiment::new(cfg)?;
    fs::create_dir_all(out)?;
    let path = out.join("dataset.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    write_jsonl(&exp.splits, &mut w)?;
    w.flush()?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn within_variance_is_exactly_zero_for_copies() {
        let v = vec![0.1, -0.3, 1e-7];
        assert_eq!(within_variance(&[&v, &v, &v]), 0.0);
        let w = vec![0.3, -0.3, 1e-7];
        assert!((within_variance(&[&v, &w]) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 0.5 * (i % 3) as f64, 1.0]).collect();
        let p = pca_2d(&rows);
        assert_eq!(p.len(), 20);
        // The first axis follows the first column with positive sign.
        assert!(p[19][0] > p[0][0]);
        let mean1: f64 = p.iter().map(|q| q[0]).sum::<f64>() / 20.0;
        assert!(mean1.abs() < 1e-12);
        assert_eq!(pca_2d(&rows), p);
        let same = pca_2d(&vec![vec![1.0, 2.0]; 4]);
        assert!(same.iter().all(|q| q == &[0.0, 0.0]));
    }

    #[test]
    fn theory_small_run_passes_and_rejects_bad_args() {
        let r = cmd_theory(2, 7, None, None).unwrap();
        assert!(r.passed, "{:?}", r.failed);
        assert!(matches!(cmd_theory(0, 1, None, None), Err(Error::Config { .. })));
        assert!(matches!(cmd_theory(1, 1, Some(-1.0), None), Err(Error::Config { .. })));
    }

    #[test]
    fn rungs_scale_width_only() {
        let base = RunConfig::default().generator;
        let r = rung_config(&base, 64);
        assert_eq!((r.d_model, r.ffn_dim, r.n_layers, r.n_heads), (64, 256, base.n_layers, base.n_heads));
    }
}
