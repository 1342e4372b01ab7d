//! Shared fixtures for the benchmarks: default-sized models and a batch of
//! rendered task items.

use atv_core::atv::{AtvAdapter, TrainExample};
use atv_core::harness::config::RunConfig;
use atv_core::harness::data::{encode_split, training_examples, EvalItem};
use atv_core::harness::run::Experiment;
use atv_core::tasks::Split;
use atv_core::transformer::TransformerModel;

pub struct Fixture {
    pub large: TransformerModel,
    pub atv: AtvAdapter,
    pub items: Vec<EvalItem>,
    pub train: Vec<TrainExample>,
}

/// Randomly initialized default-sized backbone and adapter; no training.
pub fn fixture() -> Fixture {
    let cfg = RunConfig::default();
    let exp = Experiment::new(&cfg).expect("default config");
    let mut large = TransformerModel::init(cfg.large.clone(), "large", 1).expect("large");
    large.freeze();
    let atv = AtvAdapter::init(cfg.generator.clone(), &large.config, cfg.lambda, 2).expect("adapter");
    let items = encode_split(&exp.vocab, &exp.splits, Split::TestUnseenTemplate, None).expect("items");
    let train = training_examples(&exp.vocab, exp.splits.get(Split::Train)).expect("train");
    Fixture { large, atv, items, train }
}
