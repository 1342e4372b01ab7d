//! Option-scoring evaluation, per-example prediction logs and report rows.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atv::{adaptive_vectors, AtvAdapter};
use crate::baselines::{FixedTaskVector, LoraAdapter, PrefixAdapter};
use crate::error::{Error, Result};
use crate::tasks::{Family, Split, TRAIN_TEMPLATE};
use crate::transformer::{argmax, score_options, Adapters, InjectionHook, PositionPolicy, TransformerModel};

use super::data::EvalItem;

/// What, if anything, modifies the frozen model during scoring.
#[derive(Debug, Clone, Copy)]
pub enum Intervention<'a> {
    None,
    Atv(&'a AtvAdapter),
    Fixed {
        vectors: &'a BTreeMap<String, FixedTaskVector>,
        layers: &'a BTreeSet<usize>,
        policy: PositionPolicy,
    },
    Lora(&'a LoraAdapter),
    Prefix(&'a PrefixAdapter),
}

impl Intervention<'_> {
    /// Injection hook for one item, if the method injects.
    pub fn hook(&self, item: &EvalItem) -> Result<Option<InjectionHook>> {
        Ok(match self {
            Intervention::Atv(a) => Some(a.hook(&adaptive_vectors(a, &item.query)?)),
            Intervention::Fixed { vectors, layers, policy } => {
                let v = vectors
                    .get(item.family.name())
                    .ok_or_else(|| Error::Data(format!("no fixed task vector for {}", item.family)))?;
                Some(v.hook((*layers).clone(), *policy))
            }
            _ => None,
        })
    }

    fn adapters(&self) -> Adapters<'_> {
        match self {
            Intervention::Lora(l) => Adapters {
                lora: Some(l),
                prefix: None,
            },
            Intervention::Prefix(p) => Adapters {
                lora: None,
                prefix: Some(p),
            },
            _ => Adapters::none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub method: String,
    pub seed: u64,
    pub id: String,
    pub family: Family,
    pub split: Split,
    pub template_id: usize,
    pub prefix_id: usize,
    pub gold: usize,
    pub predicted: usize,
    pub prompt_tokens: usize,
    pub scores: Vec<f64>,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.gold == self.predicted
    }
}

/// Scores every item in parallel; the output follows the input order.
pub fn predict(large: &TransformerModel, items: &[EvalItem], intervention: Intervention<'_>, method: &str, seed: u64) -> Result<Vec<Prediction>> {
    items
        .par_iter()
        .map(|item| {
            let hook = intervention.hook(item)?;
            let scores = score_options(large, &item.prompt, &item.options, hook.as_ref(), intervention.adapters())?;
            Ok(Prediction {
                method: method.to_string(),
                seed,
                id: item.id.clone(),
                family: item.family,
                split: item.split,
                template_id: item.template_id,
                prefix_id: item.prefix_id,
                gold: item.gold,
                predicted: argmax(&scores),
                prompt_tokens: item.prompt.len(),
                scores,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub family: Family,
    pub split: Split,
    pub template_id: usize,
    pub prefix_id: usize,
    pub seed: u64,
    pub n: usize,
    pub accuracy: f64,
    pub mean_prompt_tokens: f64,
}

/// One row per (method, seed, family, split, template, prefix) cell.
pub fn aggregate(predictions: &[Prediction]) -> Vec<EvalRow> {
    type Key = (String, u64, Family, Split, usize, usize);
    let mut cells: BTreeMap<Key, (usize, usize, usize)> = BTreeMap::new();
    for p in predictions {
        let key = (p.method.clone(), p.seed, p.family, p.split, p.template_id, p.prefix_id);
        let c = cells.entry(key).or_default();
        c.0 += 1;
        c.1 += usize::from(p.correct());
        c.2 += p.prompt_tokens;
    }
    cells
        .into_iter()
        .map(|((method, seed, family, split, t, p), (n, correct, tokens))| EvalRow {
            method,
            family,
            split,
            template_id: t,
            prefix_id: p,
            seed,
            n,
            accuracy: correct as f64 / n as f64,
            mean_prompt_tokens: tokens as f64 / n as f64,
        })
        .collect()
}

/// Which rows count as held-out renderings: every template other than the
/// training one.
pub fn is_held_out_template(row: &EvalRow) -> bool {
    row.template_id != TRAIN_TEMPLATE
}

/// Mean accuracy over the rows that pass `keep`, first averaged within each
/// family (variants weighted equally) and then across families.
pub fn mean_accuracy<'r>(rows: impl IntoIterator<Item = &'r EvalRow>, keep: impl Fn(&EvalRow) -> bool) -> Option<f64> {
    let mut by_family: BTreeMap<Family, (f64, usize)> = BTreeMap::new();
    for r in rows.into_iter().filter(|r| keep(r)) {
        let e = by_family.entry(r.family).or_default();
        e.0 += r.accuracy;
        e.1 += 1;
    }
    if by_family.is_empty() {
        return None;
    }
    let sum: f64 = by_family.values().map(|(s, n)| s / *n as f64).sum();
    Some(sum / by_family.len() as f64)
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(family: Family, t: usize, gold: usize, predicted: usize, tokens: usize) -> Prediction {
        Prediction {
            method: "m".into(),
            seed: 1,
            id: "x".into(),
            family,
            split: Split::TestUnseenTemplate,
            template_id: t,
            prefix_id: 0,
            gold,
            predicted,
            prompt_tokens: tokens,
            scores: vec![0.0, 0.0],
        }
    }

    #[test]
    fn rows_recompute_from_predictions() {
        let preds = vec![
            pred(Family::Parity, 0, 0, 0, 10),
            pred(Family::Parity, 0, 1, 0, 12),
            pred(Family::Parity, 1, 1, 1, 20),
            pred(Family::Modsum, 1, 2, 0, 30),
        ];
        let rows = aggregate(&preds);
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[0].n, rows[0].accuracy, rows[0].mean_prompt_tokens), (2, 0.5, 11.0));
        // Family means: parity 1.0 on template 1, modsum 0.0.
        assert_eq!(mean_accuracy(&rows, is_held_out_template), Some(0.5));
        assert_eq!(mean_accuracy(&rows, |_| false), None);
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
