//! Training of one (config, seed) run, its on-disk layout and reloading.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atv::{train_atv, AtvAdapter, AtvExpansion, TrainConfig, TrainReport, EXPANSION_NAME, GENERATOR_NAMESPACE};
use crate::baselines::icl::demonstration_text;
use crate::baselines::{build_fixed_task_vector, train_baseline, Baseline, FixedTaskVector, IclPromptBuilder, LoraAdapter, PrefixAdapter};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tasks::{make_splits, tokenize, Family, Split, Splits, Vocab, TRAIN_PREFIX, TRAIN_TEMPLATE};
use crate::tensor::Tensor;
use crate::transformer::TransformerModel;

use super::checkpoint;
use super::config::{Method, RunConfig};
use super::data::{demonstration_pool, encode_split, training_examples};
use super::eval::{predict, Intervention, Prediction};
use super::pretrain::pretrain_backbone;

pub const LARGE_NAMESPACE: &str = "large";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOSSES_FILE: &str = "losses.csv";

/// Vocabulary and splits shared by every run of a config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub vocab: Vocab,
    pub splits: Splits,
}

impl Experiment {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let vocab = Vocab::build();
        if cfg.large.vocab_size != vocab.len() || cfg.generator.vocab_size != vocab.len() {
            return Err(Error::config(
                "vocab_size",
                format!("models expect the task vocabulary of {} words", vocab.len()),
            ));
        }
        let splits = make_splits(&Family::IN_DOMAIN, &[Family::UNSEEN], cfg.data_seed, cfg.sizes)?;
        Ok(Self { vocab, splits })
    }
}

/// The trained state of any method.
#[derive(Debug, Clone)]
pub enum MethodState {
    Baseline(Baseline),
    Atv(AtvAdapter),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    /// Resolved config with `seeds` reduced to this run's seed.
    pub config: RunConfig,
    pub seed: u64,
    pub large: TransformerModel,
    pub state: MethodState,
    /// Injection layers for the fixed-vector method.
    pub layers: BTreeSet<usize>,
    pub losses: Vec<LossRow>,
    /// Adaptation statistics of a run trained in this process.
    pub report: Option<TrainReport>,
}

/// Seeds of the independent random streams of a run.
fn stream(seed: u64, tag: u64) -> u64 {
    seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// The backbone of seed `seed`: initialized, pretrained and frozen. Every
/// method of a seed starts from the same backbone.
pub fn pretrained_backbone(cfg: &RunConfig, exp: &Experiment, seed: u64) -> Result<(TransformerModel, Vec<f64>)> {
    let mut large = TransformerModel::init(cfg.large.clone(), LARGE_NAMESPACE, stream(seed, 1))?;
    let losses = pretrain_backbone(
        &mut large,
        &exp.vocab,
        exp.splits.get(Split::Train),
        cfg.pretrain_epochs,
        cfg.pretrain_lr,
        stream(seed, 2),
    )?;
    large.freeze();
    Ok((large, losses))
}

fn train_config(cfg: &RunConfig, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        lr,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
        seed: stream(seed, 3),
    }
}

/// One solved-demonstration prompt per family in the training rendering.
pub fn fixed_vectors(cfg: &RunConfig, exp: &Experiment, large: &TransformerModel, seed: u64) -> Result<BTreeMap<String, FixedTaskVector>> {
    let mut out = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(stream(seed, 4));
    for family in Family::ALL {
        let members: Vec<_> = demonstration_pool(&exp.splits, family).iter().filter(|e| e.family == family).collect();
        if members.len() < cfg.ftv_k.max(1) {
            return Err(Error::Data(format!("{} demonstrations of {family} available, {} requested", members.len(), cfg.ftv_k)));
        }
        let k = cfg.ftv_k.max(1);
        let demos: Vec<_> = sample(&mut rng, members.len(), k).into_iter().map(|i| members[i]).collect();
        let text = demonstration_text(&demos, TRAIN_TEMPLATE, TRAIN_PREFIX, "\n")?;
        let tokens = tokenize(&exp.vocab, &text);
        out.insert(family.name().to_string(), build_fixed_task_vector(large, family.name(), &tokens, cfg.ftv_lambda)?);
    }
    Ok(out)
}

/// Trains `cfg.method` on top of an already pretrained, frozen backbone.
pub fn train_method(cfg: &RunConfig, exp: &Experiment, seed: u64, large: TransformerModel, pretrain_losses: &[f64]) -> Result<TrainedRun> {
    cfg.validate()?;
    let mut losses: Vec<LossRow> = pretrain_losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRow {
            phase: "pretrain".into(),
            epoch: i + 1,
            loss,
        })
        .collect();
    let examples = training_examples(&exp.vocab, exp.splits.get(Split::Train))?;
    let layers = cfg.layers.resolve(cfg.large.n_layers)?;
    let (state, report) = match cfg.method {
        Method::ZeroShot => (MethodState::Baseline(Baseline::ZeroShot), None),
        Method::Icl => (MethodState::Baseline(Baseline::Icl(IclPromptBuilder::new(cfg.icl_k, stream(seed, 5)))), None),
        Method::Ftv => (MethodState::Baseline(Baseline::FixedVector(fixed_vectors(cfg, exp, &large, seed)?)), None),
        Method::Lora => {
            let mut b = Baseline::Lora(LoraAdapter::init(&large.config, cfg.lora, stream(seed, 6))?);
            let r = train_baseline(&mut b, &large, &examples, &train_config(cfg, cfg.lora_lr, seed))?;
            (MethodState::Baseline(b), r)
        }
        Method::Prefix => {
            let mut b = Baseline::Prefix(PrefixAdapter::init(&large.config, cfg.prefix_len, stream(seed, 6))?);
            let r = train_baseline(&mut b, &large, &examples, &train_config(cfg, cfg.prefix_lr, seed))?;
            (MethodState::Baseline(b), r)
        }
        Method::Atv => {
            let mut a = AtvAdapter::init(cfg.generator.clone(), &large.config, cfg.lambda, stream(seed, 6))?;
            a.layers = layers.clone();
            a.policy = cfg.policy;
            let r = train_atv(&mut a, &large, &examples, &train_config(cfg, cfg.lr, seed))?;
            if r.frozen_grad_entries != 0 {
                return Err(Error::contract("the frozen backbone received gradients"));
            }
            (MethodState::Atv(a), Some(r))
        }
    };
    if let Some(r) = &report {
        losses.push(LossRow {
            phase: "adapt".into(),
            epoch: 0,
            loss: r.initial_loss,
        });
        losses.extend(r.epoch_losses.iter().enumerate().map(|(i, &loss)| LossRow {
            phase: "adapt".into(),
            epoch: i + 1,
            loss,
        }));
    }
    let mut config = cfg.clone();
    config.seeds = vec![seed];
    Ok(TrainedRun {
        config,
        seed,
        large,
        state,
        layers,
        losses,
        report,
    })
}

/// Pretrains the backbone and trains the configured method.
pub fn train_run(cfg: &RunConfig, exp: &Experiment, seed: u64) -> Result<TrainedRun> {
    cfg.validate()?;
    let (large, pre) = pretrained_backbone(cfg, exp, seed)?;
    train_method(cfg, exp, seed, large, &pre)
}

impl TrainedRun {
    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn intervention(&self) -> Intervention<'_> {
        match &self.state {
            MethodState::Atv(a) => Intervention::Atv(a),
            MethodState::Baseline(Baseline::FixedVector(v)) => Intervention::Fixed {
                vectors: v,
                layers: &self.layers,
                policy: self.config.policy,
            },
            MethodState::Baseline(Baseline::Lora(l)) => Intervention::Lora(l),
            MethodState::Baseline(Baseline::Prefix(p)) => Intervention::Prefix(p),
            MethodState::Baseline(_) => Intervention::None,
        }
    }

    fn icl(&self) -> Option<&IclPromptBuilder> {
        match &self.state {
            MethodState::Baseline(Baseline::Icl(b)) => Some(b),
            _ => None,
        }
    }

    /// Predictions on every rendering of every example of `splits`.
    pub fn predict(&self, exp: &Experiment, splits: &[Split]) -> Result<Vec<Prediction>> {
        self.predict_with(exp, splits, self.intervention())
    }

    pub fn predict_with(&self, exp: &Experiment, splits: &[Split], intervention: Intervention<'_>) -> Result<Vec<Prediction>> {
        let mut out = Vec::new();
        for &split in splits {
            if exp.splits.get(split).is_empty() {
                return Err(Error::Data(format!("split {split} is empty")));
            }
            let items = encode_split(&exp.vocab, &exp.splits, split, self.icl())?;
            out.extend(predict(&self.large, &items, intervention, self.method().name(), self.seed)?);
        }
        Ok(out)
    }

    /// Every tensor of the run under its namespace.
    pub fn tensors(&self) -> Result<ParamStore> {
        let mut store = self.large.params.clone();
        match &self.state {
            MethodState::Atv(a) => {
                store.merge(a.generator.params.clone())?;
                store.merge(a.expansion.params.clone())?;
            }
            MethodState::Baseline(Baseline::Lora(l)) => store.merge(l.params.clone())?,
            MethodState::Baseline(Baseline::Prefix(p)) => store.merge(p.params.clone())?,
            MethodState::Baseline(Baseline::FixedVector(v)) => {
                for f in v.values() {
                    store.insert(f.tensor_name(), f.vectors.clone(), false)?;
                    let ids = f.demonstration.iter().map(|&i| i as f64).collect();
                    store.insert(format!("{}.demonstration", f.tensor_name()), Tensor::vector(ids)?, false)?;
                }
            }
            MethodState::Baseline(_) => {}
        }
        Ok(store)
    }

    /// Writes the checkpoint, the resolved config and the loss curve.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &self.tensors()?)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_text())?;
        let mut w = csv::Writer::from_path(dir.join(LOSSES_FILE))?;
        for row in &self.losses {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a run from its directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::from_file(&dir.join(CONFIG_FILE))?;
        let seed = match config.seeds.as_slice() {
            [s] => *s,
            _ => return Err(Error::config("seeds", "a run directory holds exactly one seed")),
        };
        let ckpt = dir.join(CHECKPOINT_FILE);
        let store = checkpoint::load(&ckpt)?;
        let bad = |e: Error| Error::Checkpoint {
            path: ckpt.clone(),
            message: e.to_string(),
        };
        let large = TransformerModel::from_params(config.large.clone(), LARGE_NAMESPACE, store.subset(&format!("{LARGE_NAMESPACE}.")), true).map_err(bad)?;
        let layers = config.layers.resolve(config.large.n_layers)?;
        let state = match config.method {
            Method::ZeroShot => MethodState::Baseline(Baseline::ZeroShot),
            Method::Icl => MethodState::Baseline(Baseline::Icl(IclPromptBuilder::new(config.icl_k, stream(seed, 5)))),
            Method::Ftv => {
                let mut v = BTreeMap::new();
                for family in Family::ALL {
                    let name = format!("{}.{}", crate::baselines::ftv::NAMESPACE, family.name());
                    let vectors = store.require(&name).map_err(bad)?.clone().with_requires_grad(false);
                    let demo = store.require(&format!("{name}.demonstration")).map_err(bad)?;
                    v.insert(
                        family.name().to_string(),
                        FixedTaskVector {
                            family: family.name().to_string(),
                            vectors,
                            demonstration: demo.data().iter().map(|&x| x as usize).collect(),
                            lambda: config.ftv_lambda,
                        },
                    );
                }
                MethodState::Baseline(Baseline::FixedVector(v))
            }
            Method::Lora => {
                let a = LoraAdapter::from_params(&config.large, config.lora, store.subset(&format!("{}.", crate::baselines::lora::NAMESPACE))).map_err(bad)?;
                MethodState::Baseline(Baseline::Lora(a))
            }
            Method::Prefix => {
                let a = PrefixAdapter::from_params(&config.large, config.prefix_len, store.subset(&format!("{}.", crate::baselines::prefix::NAMESPACE))).map_err(bad)?;
                MethodState::Baseline(Baseline::Prefix(a))
            }
            Method::Atv => {
                let gen_params = store.subset(&format!("{GENERATOR_NAMESPACE}."));
                let generator = TransformerModel::from_params(config.generator.clone(), GENERATOR_NAMESPACE, gen_params, false).map_err(bad)?;
                let weight = store.require(EXPANSION_NAME).map_err(bad)?.clone();
                let expansion = AtvExpansion::from_weight(weight, config.large.n_layers).map_err(bad)?;
                let mut a = AtvAdapter::new(generator, expansion, config.lambda, layers.clone()).map_err(bad)?;
                a.policy = config.policy;
                MethodState::Atv(a)
            }
        };
        let losses = match csv::Reader::from_path(dir.join(LOSSES_FILE)) {
            Ok(mut r) => r.deserialize().collect::<Result<Vec<LossRow>, _>>()?,
            Err(_) => Vec::new(),
        };
        Ok(Self {
            config,
            seed,
            large,
            state,
            layers,
            losses,
            report: None,
        })
    }
}

/// `{out}/{method}-seed{seed}`.
pub fn run_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(format!("{method}-seed{seed}"))
}
