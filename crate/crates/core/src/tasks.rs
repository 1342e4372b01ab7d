//! Synthetic multiple-choice task families, prompt rendering and a closed
//! word-level vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_TEMPLATES: usize = 3;
pub const ANSWER_PREFIXES: [&str; 3] = ["A:", "Answer:", "The answer is"];
/// Template and prefix used for all training renderings.
pub const TRAIN_TEMPLATE: usize = 0;
pub const TRAIN_PREFIX: usize = 0;

const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";
/// The token `contains` bodies are searched for.
pub const SENTINEL: &str = "#";
const OPTION_TAGS: [&str; 3] = ["(A)", "(B)", "(C)"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Parity,
    Modsum,
    Maxpos,
    Contains,
    Duplicate,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Parity,
        Family::Modsum,
        Family::Maxpos,
        Family::Contains,
        Family::Duplicate,
    ];
    pub const IN_DOMAIN: [Family; 4] = [Family::Parity, Family::Modsum, Family::Maxpos, Family::Contains];
    pub const UNSEEN: Family = Family::Duplicate;

    pub fn name(self) -> &'static str {
        match self {
            Family::Parity => "parity",
            Family::Modsum => "modsum",
            Family::Maxpos => "maxpos",
            Family::Contains => "contains",
            Family::Duplicate => "duplicate",
        }
    }

    pub fn category(self) -> &'static str {
        match self {
            Family::Parity => "reasoning",
            Family::Modsum => "math",
            Family::Maxpos => "knowledge",
            Family::Contains => "nlu",
            Family::Duplicate => "safety",
        }
    }

    pub fn options(self) -> &'static [&'static str] {
        match self {
            Family::Parity => &["even", "odd"],
            Family::Modsum => &["zero", "one", "two"],
            Family::Maxpos => &["first", "second", "third"],
            Family::Contains | Family::Duplicate => &["yes", "no"],
        }
    }

    fn instruction(self) -> &'static str {
        match self {
            Family::Parity => "is the count of ones even or odd",
            Family::Modsum => "what is the sum modulo three",
            Family::Maxpos => "which position holds the largest number",
            Family::Contains => "does the list contain #",
            Family::Duplicate => "does any letter appear twice",
        }
    }

    /// Words a body of this family can contain.
    fn body_words(self) -> Vec<String> {
        let letters = || LETTERS.chars().map(String::from).collect::<Vec<_>>();
        match self {
            Family::Parity => vec!["0".into(), "1".into()],
            Family::Modsum => (0..3).map(|d| d.to_string()).collect(),
            Family::Maxpos => {
                let mut w: Vec<String> = (0..10).map(|d| d.to_string()).collect();
                w.push(",".into());
                w
            }
            Family::Contains => {
                let mut w = letters();
                w.push(SENTINEL.to_string());
                w
            }
            Family::Duplicate => letters(),
        }
    }

    /// Closed-form label of a body.
    pub fn label(self, body: &str) -> Result<usize> {
        let toks: Vec<&str> = body.split_whitespace().collect();
        let bad = || Error::Data(format!("malformed {} body: {body:?}", self.name()));
        match self {
            Family::Parity => {
                if toks.len() != 6 || toks.iter().any(|t| *t != "0" && *t != "1") {
                    return Err(bad());
                }
                Ok(toks.iter().filter(|t| **t == "1").count() % 2)
            }
            Family::Modsum => {
                let digits: Vec<u32> = toks.iter().map(|t| t.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                if digits.len() != 5 || digits.iter().any(|&d| d > 2) {
                    return Err(bad());
                }
                Ok((digits.iter().sum::<u32>() % 3) as usize)
            }
            Family::Maxpos => {
                let nums: Vec<u32> = body
                    .split(',')
                    .map(|group| {
                        let digits: Vec<&str> = group.split_whitespace().collect();
                        match digits.as_slice() {
                            [t, o] if t.len() == 1 && o.len() == 1 => {
                                let n = format!("{t}{o}").parse::<u32>().map_err(|_| bad())?;
                                if (10..100).contains(&n) { Ok(n) } else { Err(bad()) }
                            }
                            _ => Err(bad()),
                        }
                    })
                    .collect::<Result<_>>()?;
                if nums.len() != 3 {
                    return Err(bad());
                }
                let max = *nums.iter().max().expect("three numbers");
                if nums.iter().filter(|&&n| n == max).count() != 1 {
                    return Err(bad());
                }
                Ok(nums.iter().position(|&n| n == max).expect("present"))
            }
            Family::Contains => {
                if toks.len() != 8 {
                    return Err(bad());
                }
                Ok(if toks.contains(&SENTINEL) { 0 } else { 1 })
            }
            Family::Duplicate => {
                if toks.len() != 6 {
                    return Err(bad());
                }
                let distinct: HashSet<&&str> = toks.iter().collect();
                Ok(if distinct.len() < toks.len() { 0 } else { 1 })
            }
        }
    }

    /// Random body with the requested label.
    fn sample_body(self, gold: usize, rng: &mut ChaCha8Rng) -> String {
        let letters: Vec<char> = LETTERS.chars().collect();
        let join = |v: Vec<String>| v.join(" ");
        match self {
            Family::Parity => loop {
                let bits: Vec<u8> = (0..6).map(|_| rng.random_range(0..2)).collect();
                if bits.iter().filter(|&&b| b == 1).count() % 2 == gold {
                    return join(bits.iter().map(u8::to_string).collect());
                }
            },
            Family::Modsum => loop {
                let d: Vec<u32> = (0..5).map(|_| rng.random_range(0..3)).collect();
                if (d.iter().sum::<u32>() % 3) as usize == gold {
                    return join(d.iter().map(u32::to_string).collect());
                }
            },
            Family::Maxpos => loop {
                let n: Vec<u32> = (0..3).map(|_| rng.random_range(10..100)).collect();
                let max = *n.iter().max().expect("three numbers");
                let tens: HashSet<u32> = n.iter().map(|x| x / 10).collect();
                if tens.len() == 3 && n.iter().position(|&x| x == max) == Some(gold) {
                    return n.iter().map(|x| format!("{} {}", x / 10, x % 10)).collect::<Vec<_>>().join(" , ");
                }
            },
            Family::Contains => {
                let mut words: Vec<String> = (0..8).map(|_| letters.choose(rng).expect("non-empty").to_string()).collect();
                if gold == 0 {
                    words[rng.random_range(0..8)] = SENTINEL.to_string();
                }
                join(words)
            }
            Family::Duplicate => {
                let mut pool = letters.clone();
                pool.shuffle(rng);
                let mut list: Vec<char> = pool[..6].to_vec();
                if gold == 0 {
                    let src = rng.random_range(0..6);
                    let mut dst = rng.random_range(0..5);
                    if dst >= src {
                        dst += 1;
                    }
                    list[dst] = list[src];
                }
                join(list.iter().map(char::to_string).collect())
            }
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config("family", format!("unknown task family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub family: Family,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub family: Family,
    /// Template-free question content.
    pub question: String,
    pub options: Vec<String>,
    pub gold: usize,
}

impl Example {
    /// Generator input: the question content and its options, with no
    /// template and no answer prefix.
    pub fn query_text(&self) -> String {
        format!("{}\n{}", self.question, options_line(&self.options))
    }
}

fn family_seed(spec: &TaskSpec) -> u64 {
    let tag = Family::ALL.iter().position(|f| *f == spec.family).expect("listed") as u64;
    spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(tag + 1)
}

/// `n` examples with labels assigned round-robin, so every label count is
/// within one of `n / |options|`. Bodies are kept distinct while the family's
/// input space allows it.
pub fn generate_dataset(spec: &TaskSpec, n: usize) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::config("n", "dataset size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(family_seed(spec));
    let options: Vec<String> = spec.family.options().iter().map(|s| s.to_string()).collect();
    let k = options.len();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let gold = i % k;
        let mut body = spec.family.sample_body(gold, &mut rng);
        for _ in 0..64 {
            if !seen.contains(&body) {
                break;
            }
            body = spec.family.sample_body(gold, &mut rng);
        }
        seen.insert(body.clone());
        out.push(Example {
            id: format!("{}-{i:04}", spec.family),
            family: spec.family,
            question: body,
            options: options.clone(),
            gold,
        });
    }
    Ok(out)
}

pub fn options_line(options: &[String]) -> String {
    let parts: Vec<String> = options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{} {o}", OPTION_TAGS.get(i).copied().unwrap_or("(?)")))
        .collect();
    format!("Options: {}", parts.join(" , "))
}

pub fn render_question(example: &Example, template_id: usize) -> Result<String> {
    let body = &example.question;
    let instr = example.family.instruction();
    Ok(match template_id {
        0 => format!("{body} . {instr} ?"),
        1 => format!("Input : {body} . Question : {instr} ?"),
        2 => format!("Look at {body} and tell me {instr} ."),
        _ => return Err(Error::contract(format!("template id {template_id} outside 0..{N_TEMPLATES}"))),
    })
}

/// `(prompt, answers)`: question template, newline, options line, newline,
/// answer prefix. Answers are the option strings.
pub fn render_prompt(example: &Example, template_id: usize, prefix_id: usize) -> Result<(String, Vec<String>)> {
    let prefix = ANSWER_PREFIXES
        .get(prefix_id)
        .ok_or_else(|| Error::contract(format!("prefix id {prefix_id} outside 0..{}", ANSWER_PREFIXES.len())))?;
    let q = render_question(example, template_id)?;
    Ok((format!("{q}\n{}\n{prefix}", options_line(&example.options)), example.options.clone()))
}

/// All `(template_id, prefix_id)` pairs.
pub fn variants() -> impl Iterator<Item = (usize, usize)> {
    (0..N_TEMPLATES).flat_map(|t| (0..ANSWER_PREFIXES.len()).map(move |p| (t, p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestSeenTemplate,
    TestUnseenTemplate,
    UnseenTask,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::TestSeenTemplate,
        Split::TestUnseenTemplate,
        Split::UnseenTask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeenTemplate => "test_seen_template",
            Split::TestUnseenTemplate => "test_unseen_template",
            Split::UnseenTask => "unseen_task",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 90, test: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub sets: BTreeMap<Split, Vec<Example>>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[Example] {
        self.sets.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn families(&self, split: Split) -> BTreeSet<Family> {
        self.get(split).iter().map(|e| e.family).collect()
    }

    /// Rejects any example id shared between splits and any training data
    /// from a held-out family.
    pub fn check_integrity(&self, held_out: &[Family]) -> Result<()> {
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for (split, exs) in &self.sets {
            for e in exs {
                if let Some(prev) = owner.insert(&e.id, *split) {
                    return Err(Error::Integrity(format!("example {} appears in {prev} and {split}", e.id)));
                }
            }
        }
        if let Some(e) = self.get(Split::Train).iter().find(|e| held_out.contains(&e.family)) {
            return Err(Error::Integrity(format!("held-out family {} found in training data", e.family)));
        }
        Ok(())
    }
}

/// Per in-domain family: `train` training examples followed by two test
/// buckets of `test`; the held-out family contributes `test` examples to
/// the unseen-task split only. Each bucket is label-balanced.
pub fn make_splits(in_domain: &[Family], held_out: &[Family], seed: u64, sizes: SplitSizes) -> Result<Splits> {
    if in_domain.len() < 2 || held_out.is_empty() {
        return Err(Error::config("tasks", "need at least two in-domain families and one held-out family"));
    }
    if let Some(f) = in_domain.iter().find(|f| held_out.contains(f)) {
        return Err(Error::Integrity(format!("family {f} is both in-domain and held out")));
    }
    if sizes.train == 0 || sizes.test == 0 {
        return Err(Error::config("tasks", "split sizes must be positive"));
    }
    let mut sets: BTreeMap<Split, Vec<Example>> = Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for &family in in_domain {
        let data = generate_dataset(&TaskSpec { family, seed }, sizes.train + 2 * sizes.test)?;
        let (train, rest) = data.split_at(sizes.train);
        let (seen, unseen) = rest.split_at(sizes.test);
        sets.get_mut(&Split::Train).expect("split").extend_from_slice(train);
        sets.get_mut(&Split::TestSeenTemplate).expect("split").extend_from_slice(seen);
        sets.get_mut(&Split::TestUnseenTemplate).expect("split").extend_from_slice(unseen);
    }
    for &family in held_out {
        let data = generate_dataset(&TaskSpec { family, seed }, sizes.test)?;
        sets.get_mut(&Split::UnseenTask).expect("split").extend(data);
    }
    let splits = Splits { sets };
    splits.check_integrity(held_out)?;
    Ok(splits)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonlRecord {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold: usize,
    pub family: Family,
    pub split: Split,
}

pub fn write_jsonl<W: Write>(splits: &Splits, mut w: W) -> Result<()> {
    for (split, exs) in &splits.sets {
        for e in exs {
            let rec = JsonlRecord {
                id: e.id.clone(),
                question: e.question.clone(),
                options: e.options.clone(),
                gold: e.gold,
                family: e.family,
                split: *split,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const NEWLINE: &str = "\n";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every word any family, template or prefix can
    /// produce, in sorted order.
    pub fn build() -> Self {
        let mut corpus = BTreeSet::new();
        let mut add = |text: &str| {
            for w in split_words(text) {
                corpus.insert(w.to_string());
            }
        };
        for family in Family::ALL {
            for w in family.body_words() {
                add(&w);
            }
            let probe = Example {
                id: String::new(),
                family,
                question: String::new(),
                options: family.options().iter().map(|s| s.to_string()).collect(),
                gold: 0,
            };
            for (t, p) in variants() {
                add(&render_prompt(&probe, t, p).expect("valid ids").0);
            }
        }
        let mut words: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        words.extend(corpus);
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn bos(&self) -> usize {
        self.ids[BOS]
    }

    pub fn unk(&self) -> usize {
        self.ids[UNK]
    }

    /// Word ids without BOS.
    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        split_words(text).map(|w| self.id(w).unwrap_or_else(|| self.unk())).collect()
    }

    /// Decodes ids, dropping BOS; the inverse of [`tokenize`] on corpus text.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut prev_newline = true;
        for &id in ids {
            let w = self.word(id).unwrap_or(UNK);
            if w == BOS {
                continue;
            }
            if w == NEWLINE {
                out.push('\n');
                prev_newline = true;
                continue;
            }
            if !prev_newline {
                out.push(' ');
            }
            out.push_str(w);
            prev_newline = false;
        }
        out
    }
}

fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split('\n')
        .enumerate()
        .flat_map(|(i, line)| (i > 0).then_some(NEWLINE).into_iter().chain(line.split_whitespace()))
}

/// BOS followed by whitespace-separated words; newlines are tokens of their
/// own and unknown words map to UNK.
pub fn tokenize(vocab: &Vocab, text: &str) -> Vec<usize> {
    let mut ids = vec![vocab.bos()];
    ids.extend(vocab.encode_words(text));
    ids
}
