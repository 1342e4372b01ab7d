//! k-shot in-context prompts built from the training split.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tasks::{render_prompt, Example};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IclPromptBuilder {
    pub k: usize,
    pub seed: u64,
    pub separator: String,
}

impl IclPromptBuilder {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            separator: "\n".into(),
        }
    }

    /// Demonstrations for `query`, drawn without replacement from the
    /// same-family members of `train` (never the query itself).
    pub fn demonstrations<'t>(&self, query: &Example, train: &'t [Example]) -> Result<Vec<&'t Example>> {
        let pool: Vec<&Example> = train
            .iter()
            .filter(|e| e.family == query.family && e.id != query.id)
            .collect();
        if pool.len() < self.k {
            return Err(Error::Data(format!(
                "{} training examples of {} available, {} demonstrations requested",
                pool.len(),
                query.family,
                self.k
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&query.id));
        Ok(sample(&mut rng, pool.len(), self.k).into_iter().map(|i| pool[i]).collect())
    }

    /// Solved demonstrations followed by the query, all in the query's
    /// template and prefix.
    pub fn build(&self, query: &Example, train: &[Example], template_id: usize, prefix_id: usize) -> Result<String> {
        let demos = demonstration_text(&self.demonstrations(query, train)?, template_id, prefix_id, &self.separator)?;
        let q = render_prompt(query, template_id, prefix_id)?.0;
        Ok(if demos.is_empty() { q } else { format!("{demos}{}{q}", self.separator) })
    }
}

/// Solved examples in the given rendering, joined by `separator`.
pub fn demonstration_text(demos: &[&Example], template_id: usize, prefix_id: usize, separator: &str) -> Result<String> {
    let mut parts = Vec::with_capacity(demos.len());
    for d in demos {
        let (p, answers) = render_prompt(d, template_id, prefix_id)?;
        parts.push(format!("{p} {}", answers[d.gold]));
    }
    Ok(parts.join(separator))
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_dataset, tokenize, Family, TaskSpec, Vocab};

    #[test]
    fn demonstrations_come_from_training_family() {
        let train = generate_dataset(&TaskSpec { family: Family::Parity, seed: 1 }, 20).unwrap();
        let mut other = generate_dataset(&TaskSpec { family: Family::Modsum, seed: 1 }, 20).unwrap();
        other.extend(train.iter().cloned());
        let q = generate_dataset(&TaskSpec { family: Family::Parity, seed: 9 }, 1).unwrap().remove(0);
        let b = IclPromptBuilder::new(4, 7);
        let demos = b.demonstrations(&q, &other).unwrap();
        assert_eq!(demos.len(), 4);
        assert!(demos.iter().all(|d| d.family == Family::Parity && d.id != q.id));
        assert_eq!(demos, b.demonstrations(&q, &other).unwrap());
    }

    #[test]
    fn prompt_length_grows_linearly_in_k() {
        let v = Vocab::build();
        let train = generate_dataset(&TaskSpec { family: Family::Parity, seed: 1 }, 30).unwrap();
        let q = generate_dataset(&TaskSpec { family: Family::Parity, seed: 5 }, 1).unwrap().remove(0);
        let lens: Vec<usize> = (0..4)
            .map(|k| tokenize(&v, &IclPromptBuilder::new(k, 3).build(&q, &train, 0, 0).unwrap()).len())
            .collect();
        // Every parity rendering has the same length, so increments are constant.
        let step = lens[1] - lens[0];
        assert!(step > 0);
        for w in lens.windows(2) {
            assert_eq!(w[1] - w[0], step);
        }
        assert!(IclPromptBuilder::new(40, 3).build(&q, &train, 0, 0).is_err());
    }
}
