//! Training loops, batching, dev-set model selection, evaluation and
//! checkpoint persistence.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{alignment, cosine_samples, kde_overlap, uniformity};
use crate::data::{synth_corpus, Class, SentencePair, SynthConfig};
use crate::diffkit::{AdamW, AdamWConfig, Tape};
use crate::encoder::{Encoder, FrozenStore, ToyEncoder};
use crate::error::{Error, Result};
use crate::metrics::{auc, pearson, per_class_spearman, router_accuracy, spearman, EvalReport};
use crate::mixsp::{HeadConfig, HeadParams, Linear, Model, ParamCount, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Ranking and classification losses backpropagated jointly.
    EndToEnd,
    /// Router and encoder fitted on classification first, then projectors
    /// and scorer on ranking with the router and encoder frozen.
    TwoStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    DevSpearman,
    DevLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs per stage.
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub selection_metric: SelectionMetric,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            mode: TrainMode::EndToEnd,
            selection_metric: SelectionMetric::DevSpearman,
            weight_decay: AdamWConfig::default().weight_decay,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Index batches for one epoch: a permutation seeded by `(seed, epoch)` cut
/// into runs of `batch_size`, the last possibly short.
pub fn shuffle_batches(n: usize, batch_size: usize, epoch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Random stream used for parameter initialisation under `seed`.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Joint,
    Classify,
    Rank,
}

impl Stage {
    fn trainable(self) -> Trainable {
        match self {
            Stage::Joint => Trainable::ALL,
            Stage::Classify => Trainable {
                encoder: true,
                router: true,
                projectors: false,
                scorer: false,
            },
            Stage::Rank => Trainable {
                encoder: false,
                router: false,
                projectors: true,
                scorer: true,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean per-sample training objective of the stage over the epoch.
    pub train_loss: f64,
    pub dev_spearman: Option<f64>,
    pub dev_loss: Option<f64>,
    pub dev_router_accuracy: Option<f64>,
    /// Whether this epoch could be selected as the returned model.
    pub eligible: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the returned model, if training ran.
    pub best: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: History,
}

/// Build a model with the toy encoder initialised from `seed`.
pub fn init_toy_model(
    config: HeadConfig,
    vocab_size: usize,
    dim: usize,
    trainable: bool,
    seed: u64,
) -> Result<Model> {
    let mut rng = init_rng(seed);
    let enc = ToyEncoder::init(&mut rng, vocab_size, dim, trainable)?;
    Model::new(&mut rng, config, Encoder::Toy(enc))
}

/// Build a model around an existing encoder, head initialised from `seed`.
pub fn init_model(config: HeadConfig, encoder: Encoder, seed: u64) -> Result<Model> {
    Model::new(&mut init_rng(seed), config, encoder)
}

fn run_epoch(
    model: &mut Model,
    opt: &mut AdamW,
    train: &[SentencePair],
    cfg: &TrainConfig,
    epoch: usize,
    stage: Stage,
) -> Result<f64> {
    let trainable = stage.trainable();
    let mut total = 0.0;
    for batch in shuffle_batches(train.len(), cfg.batch_size, epoch, cfg.seed) {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, trainable);
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let g = model.sample_on_tape(&mut tape, &vars, &train[i])?;
            losses.push(match stage {
                Stage::Joint => g.total,
                Stage::Classify => g.clf.ok_or_else(|| {
                    Error::Config(
                        "classification stage needs a router and the classification loss".into(),
                    )
                })?,
                Stage::Rank => tape.mul_const(g.rl, model.config.alpha1),
            });
        }
        let loss = tape.mean_scalars(&losses)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss {value} in epoch {epoch}"
            )));
        }
        total += value * batch.len() as f64;
        let grads = tape.backward(loss)?;
        let wanted: BTreeMap<String, Vec<f64>> = Model::var_names(&vars)
            .into_iter()
            .filter_map(|(name, v)| grads.get(v).map(|g| (name, g.to_vec())))
            .collect();
        let mut tensors = model.named_tensors_mut();
        let mut updates: Vec<(&str, &mut crate::diffkit::Tensor, &[f64])> = tensors
            .iter_mut()
            .filter_map(|(name, t)| {
                wanted
                    .get(name)
                    .map(|g| (name.as_str(), &mut **t, g.as_slice()))
            })
            .collect();
        opt.step(&mut updates).map_err(|e| match e {
            Error::NonFiniteGradient(p) => {
                Error::Divergence(format!("non-finite gradient for `{p}` in epoch {epoch}"))
            }
            other => other,
        })?;
    }
    Ok(total / train.len() as f64)
}

fn dev_metrics(model: &Model, dev: &[SentencePair]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if dev.is_empty() {
        return (None, None, None);
    }
    let mut preds = Vec::with_capacity(dev.len());
    let mut gold = Vec::with_capacity(dev.len());
    let mut chosen = Vec::with_capacity(dev.len());
    let mut bins = Vec::with_capacity(dev.len());
    for p in dev {
        if let Ok(pred) = model.predict(p) {
            preds.push(pred.score);
            gold.push(p.gold_score);
            chosen.push(pred.projected.decisions.chosen);
            bins.push(p.bin);
        }
    }
    let rho = spearman(&preds, &gold).ok();
    let loss = model.mean_loss(dev).ok().filter(|l| l.is_finite());
    let acc = if model.config.has_router() {
        router_accuracy(&chosen, &bins).ok().map(|a| a.per_sentence)
    } else {
        None
    };
    (rho, loss, acc)
}

fn better(metric: SelectionMetric, candidate: &EpochRecord, best: Option<&EpochRecord>) -> bool {
    let key = |r: &EpochRecord| match metric {
        SelectionMetric::DevSpearman => r.dev_spearman.unwrap_or(f64::NEG_INFINITY),
        SelectionMetric::DevLoss => -r.dev_loss.unwrap_or(f64::INFINITY),
    };
    match best {
        None => true,
        Some(b) => key(candidate) > key(b),
    }
}

/// Run `epochs` epochs of one stage in place, numbering them from
/// `first_epoch`; returns the per-epoch mean training objective.
pub fn train_stage(
    model: &mut Model,
    train: &[SentencePair],
    cfg: &TrainConfig,
    stage: Stage,
    first_epoch: usize,
) -> Result<Vec<f64>> {
    let mut opt = AdamW::new(cfg.optimizer())?;
    (first_epoch..first_epoch + cfg.epochs)
        .map(|e| run_epoch(model, &mut opt, train, cfg, e, stage))
        .collect()
}

/// Train `model` and return the eligible epoch-end snapshot with the best
/// dev metric (the last epoch when `dev` is empty).
pub fn train(
    mut model: Model,
    train: &[SentencePair],
    dev: &[SentencePair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let k = model.config.k_bins();
    if let Some(p) = train.iter().chain(dev).find(|p| p.bin >= k) {
        return Err(Error::Config(format!(
            "pair `{}` has bin {} outside the {k}-bin scheme",
            p.id, p.bin
        )));
    }
    let two_stage = cfg.mode == TrainMode::TwoStage;
    if model.config.clf_active() || two_stage {
        let bins: HashSet<usize> = train.iter().map(|p| p.bin).collect();
        if bins.len() < 2 {
            return Err(Error::Config(
                "the training split holds a single class but classification is enabled".into(),
            ));
        }
    }
    if two_stage && !model.config.has_router() {
        return Err(Error::Config("two-stage training needs a router".into()));
    }

    let stages: &[Stage] = if two_stage {
        &[Stage::Classify, Stage::Rank]
    } else {
        &[Stage::Joint]
    };
    let mut history = History::default();
    let mut best_model: Option<Model> = None;
    let mut epoch_index = 0;
    for &stage in stages {
        let mut opt = AdamW::new(cfg.optimizer())?;
        for _ in 0..cfg.epochs {
            let train_loss = run_epoch(&mut model, &mut opt, train, cfg, epoch_index, stage)?;
            let (dev_spearman, dev_loss, dev_router_accuracy) = dev_metrics(&model, dev);
            let rec = EpochRecord {
                epoch: epoch_index,
                stage,
                train_loss,
                dev_spearman,
                dev_loss,
                dev_router_accuracy,
                eligible: stage != Stage::Classify,
            };
            let choose = rec.eligible
                && (dev.is_empty()
                    || better(
                        cfg.selection_metric,
                        &rec,
                        history.best.map(|b| &history.epochs[b]),
                    ));
            history.epochs.push(rec);
            if choose {
                history.best = Some(history.epochs.len() - 1);
                best_model = Some(model.clone());
            }
            epoch_index += 1;
        }
    }
    Ok(TrainOutcome {
        model: best_model.unwrap_or(model),
        history,
    })
}

/// Full evaluation of `model` on `pairs`.
pub fn evaluate(model: &Model, pairs: &[SentencePair]) -> Result<EvalReport> {
    let mut report = EvalReport {
        n_pairs: pairs.len(),
        param_count: Some(model.param_count()),
        ..EvalReport::default()
    };
    let mut preds = Vec::new();
    let mut kept: Vec<&SentencePair> = Vec::new();
    let mut z_pairs = Vec::new();
    let mut chosen = Vec::new();
    for p in pairs {
        match model.predict(p) {
            Ok(pred) => {
                preds.push(pred.score);
                kept.push(p);
                chosen.push(pred.projected.decisions.chosen);
                z_pairs.push((pred.projected.z_x1, pred.projected.z_x2));
            }
            Err(Error::DegenerateVector(_)) => report.skipped_pairs += 1,
            Err(e) => return Err(e),
        }
    }
    let gold: Vec<f64> = kept.iter().map(|p| p.gold_score).collect();
    let classes: Vec<Class> = kept.iter().map(|p| p.class).collect();
    report.spearman_overall = report.record("spearman_overall", spearman(&preds, &gold));
    let (u, l) = per_class_spearman(&preds, &gold, &classes);
    report.spearman_upper = report.record("spearman_upper", u);
    report.spearman_lower = report.record("spearman_lower", l);
    report.pearson = report.record("pearson", pearson(&preds, &gold));
    let labels: Vec<bool> = classes.iter().map(|c| *c == Class::Upper).collect();
    report.auc = report.record("auc", auc(&preds, &labels));
    if model.config.has_router() {
        let bins: Vec<usize> = kept.iter().map(|p| p.bin).collect();
        match router_accuracy(&chosen, &bins) {
            Ok(a) => {
                report.router_accuracy = Some(a.per_sentence);
                report.router_accuracy_pairs = Some(a.per_pair);
            }
            Err(e) => {
                report
                    .errors
                    .insert("router_accuracy".into(), e.to_string());
            }
        }
    }
    let overlap =
        cosine_samples(model, pairs).and_then(|s| kde_overlap(&s.samples).map(|(o, _)| o));
    report.overlap = report.record("overlap", overlap);
    let positives: Vec<(Vec<f64>, Vec<f64>)> = z_pairs
        .iter()
        .zip(&classes)
        .filter(|(_, c)| **c == Class::Upper)
        .map(|(z, _)| z.clone())
        .collect();
    report.alignment_z = report.record("alignment_z", alignment(&positives));
    let all: Vec<Vec<f64>> = z_pairs.into_iter().flat_map(|(a, b)| [a, b]).collect();
    report.uniformity_z = report.record("uniformity_z", uniformity(&all));
    Ok(report)
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "mixsp-checkpoint";
const FLOAT_ENCODING: &str = "shortest round-trip decimal";

/// How to rebuild the encoder when loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderRecord {
    /// Parameters live in the checkpoint's parameter map.
    Toy {
        trainable: bool,
    },
    Frozen {
        store: String,
    },
    Synthetic {
        generator: SynthConfig,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    float_encoding: String,
    dim: usize,
    encoder: EncoderRecord,
    head_config: HeadConfig,
    train_config: Option<TrainConfig>,
    params: BTreeMap<String, crate::diffkit::Tensor>,
    param_count: ParamCount,
    history: History,
}

/// A model with the settings and history it was trained under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: Option<TrainConfig>,
    pub history: History,
}

pub fn save_checkpoint(
    model: &Model,
    train_config: Option<&TrainConfig>,
    history: &History,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    model.validate()?;
    let encoder = match &model.encoder {
        Encoder::Toy(t) => EncoderRecord::Toy {
            trainable: t.trainable,
        },
        Encoder::Frozen(s) => EncoderRecord::Frozen {
            store: s
                .origin
                .as_ref()
                .ok_or_else(|| {
                    Error::Checkpoint(
                        "a frozen store must be loaded from a file to be checkpointed".into(),
                    )
                })?
                .display()
                .to_string(),
        },
        Encoder::Synthetic(g) => EncoderRecord::Synthetic {
            generator: g.config.clone(),
        },
    };
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        float_encoding: FLOAT_ENCODING.into(),
        dim: model.dim(),
        encoder,
        head_config: model.config.clone(),
        train_config: train_config.cloned(),
        params: model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
        param_count: model.param_count(),
        history: history.clone(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn take(
    params: &mut BTreeMap<String, crate::diffkit::Tensor>,
    name: &str,
) -> Result<crate::diffkit::Tensor> {
    let t = params
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` is missing")))?;
    crate::diffkit::Tensor::new(t.shape().to_vec(), t.values().to_vec())
        .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))
}

fn take_linear(
    params: &mut BTreeMap<String, crate::diffkit::Tensor>,
    prefix: &str,
) -> Result<Linear> {
    Ok(Linear {
        w: take(params, &format!("{prefix}.w"))?,
        b: take(params, &format!("{prefix}.b"))?,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if raw.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(raw)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut params = file.params;
    let encoder = match &file.encoder {
        EncoderRecord::Toy { trainable } => Encoder::Toy(ToyEncoder {
            embedding: take(&mut params, ToyEncoder::PARAM_NAMES[0])?,
            w_ctx: take(&mut params, ToyEncoder::PARAM_NAMES[1])?,
            b_ctx: take(&mut params, ToyEncoder::PARAM_NAMES[2])?,
            w_cls: take(&mut params, ToyEncoder::PARAM_NAMES[3])?,
            b_cls: take(&mut params, ToyEncoder::PARAM_NAMES[4])?,
            trainable: *trainable,
        }),
        EncoderRecord::Frozen { store } => {
            Encoder::Frozen(FrozenStore::load(store, Some(file.dim))?)
        }
        EncoderRecord::Synthetic { generator } => Encoder::Synthetic(synth_corpus(generator)?.1),
    };
    let config = file.head_config;
    let head = HeadParams {
        router: if config.has_router() {
            Some(take_linear(&mut params, "router")?)
        } else {
            None
        },
        projectors: (0..config.n_projectors())
            .map(|c| take_linear(&mut params, &format!("projector{c}")))
            .collect::<Result<_>>()?,
        scorer: if config.has_scorer() {
            Some(take_linear(&mut params, "scorer")?)
        } else {
            None
        },
    };
    if let Some(extra) = params.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    let model = Model {
        config,
        encoder,
        head,
    };
    let actual = model.head.projectors[0]
        .w
        .shape()
        .get(1)
        .copied()
        .unwrap_or(0);
    if actual != file.dim {
        return Err(Error::Dimension {
            what: "checkpoint `dim` field".into(),
            expected: actual,
            found: file.dim,
        });
    }
    model.validate()?;
    if model.param_count() != file.param_count {
        return Err(Error::Checkpoint(
            "stored parameter count disagrees with the parameters".into(),
        ));
    }
    Ok(Checkpoint {
        model,
        train_config: file.train_config,
        history: file.history,
    })
}
