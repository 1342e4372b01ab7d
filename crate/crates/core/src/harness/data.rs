//! Token-level views of the task splits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::atv::TrainExample;
use crate::baselines::IclPromptBuilder;
use crate::error::Result;
use crate::tasks::{render_prompt, tokenize, variants, Example, Family, Split, Splits, Vocab, TRAIN_PREFIX, TRAIN_TEMPLATE};

/// One example in one rendering, ready for option scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub id: String,
    pub family: Family,
    pub split: Split,
    pub template_id: usize,
    pub prefix_id: usize,
    /// Generator input.
    pub query: Vec<usize>,
    /// Large-model input, including any demonstrations.
    pub prompt: Vec<usize>,
    pub options: Vec<Vec<usize>>,
    pub gold: usize,
}

/// Where ICL demonstrations come from: training data for in-domain
/// families, the family's own split (query excluded) otherwise.
pub fn demonstration_pool(splits: &Splits, family: Family) -> &[Example] {
    let train = splits.get(Split::Train);
    if train.iter().any(|e| e.family == family) {
        train
    } else {
        splits.get(Split::UnseenTask)
    }
}

/// Every example of `split` in every template × prefix rendering, ordered
/// by example then variant.
pub fn encode_split(vocab: &Vocab, splits: &Splits, split: Split, icl: Option<&IclPromptBuilder>) -> Result<Vec<EvalItem>> {
    let mut out = Vec::new();
    for ex in splits.get(split) {
        let query = tokenize(vocab, &ex.query_text());
        let options: Vec<Vec<usize>> = ex.options.iter().map(|o| vocab.encode_words(o)).collect();
        for (t, p) in variants() {
            let text = match icl {
                Some(b) => b.build(ex, demonstration_pool(splits, ex.family), t, p)?,
                None => render_prompt(ex, t, p)?.0,
            };
            out.push(EvalItem {
                id: ex.id.clone(),
                family: ex.family,
                split,
                template_id: t,
                prefix_id: p,
                query: query.clone(),
                prompt: tokenize(vocab, &text),
                options: options.clone(),
                gold: ex.gold,
            });
        }
    }
    Ok(out)
}

/// Supervised examples in the training rendering.
pub fn training_examples(vocab: &Vocab, examples: &[Example]) -> Result<Vec<TrainExample>> {
    examples
        .iter()
        .map(|ex| {
            let (prompt, answers) = render_prompt(ex, TRAIN_TEMPLATE, TRAIN_PREFIX)?;
            Ok(TrainExample {
                query: tokenize(vocab, &ex.query_text()),
                prompt: tokenize(vocab, &prompt),
                answer: vocab.encode_words(&answers[ex.gold]),
                family: ex.family.name().to_string(),
            })
        })
        .collect()
}

/// Backbone pretraining text: each example once, in a variant drawn from
/// `rng` and completed by an option drawn uniformly at random, so the
/// answer format is learnt but the labels are not.
pub fn pretraining_sequences(vocab: &Vocab, examples: &[Example], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let all: Vec<(usize, usize)> = variants().collect();
    examples
        .iter()
        .map(|ex| {
            let (t, p) = all[rng.random_range(0..all.len())];
            let (prompt, answers) = render_prompt(ex, t, p)?;
            let answer = &answers[rng.random_range(0..answers.len())];
            Ok(tokenize(vocab, &format!("{prompt} {answer}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_splits, SplitSizes};

    fn splits() -> Splits {
        make_splits(&Family::IN_DOMAIN, &[Family::UNSEEN], 3, SplitSizes { train: 8, test: 4 }).unwrap()
    }

    #[test]
    fn nine_renderings_per_example() {
        let v = Vocab::build();
        let s = splits();
        let items = encode_split(&v, &s, Split::TestUnseenTemplate, None).unwrap();
        assert_eq!(items.len(), 4 * 4 * 9);
        assert!(items.iter().all(|i| !i.prompt.contains(&v.unk()) && !i.query.contains(&v.unk())));
        // The generator sees the same query whichever rendering the large model gets.
        assert!(items[..9].iter().all(|i| i.query == items[0].query));
        assert_eq!(items[..9].iter().map(|i| &i.prompt).collect::<std::collections::HashSet<_>>().len(), 9);
    }

    #[test]
    fn icl_prompts_are_longer_and_unseen_pool_is_own_split() {
        let v = Vocab::build();
        let s = splits();
        let b = IclPromptBuilder::new(2, 1);
        let plain = encode_split(&v, &s, Split::UnseenTask, None).unwrap();
        let icl = encode_split(&v, &s, Split::UnseenTask, Some(&b)).unwrap();
        assert!(icl.iter().zip(&plain).all(|(a, p)| a.prompt.len() > p.prompt.len() && a.prompt.ends_with(&p.prompt[1..])));
        assert!(std::ptr::eq(demonstration_pool(&s, Family::UNSEEN), s.get(Split::UnseenTask)));
    }

    #[test]
    fn training_answers_are_gold_options() {
        let v = Vocab::build();
        let s = splits();
        let tr = training_examples(&v, s.get(Split::Train)).unwrap();
        for (t, e) in tr.iter().zip(s.get(Split::Train)) {
            assert_eq!(t.answer, v.encode_words(&e.options[e.gold]));
            assert_eq!(t.family, e.family.name());
        }
    }
}
