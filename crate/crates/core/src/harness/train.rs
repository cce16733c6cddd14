//! Dataset assembly, the training loop with validation-based selection, and evaluation.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{MetricsRecord, Prediction};
use crate::decoders::{count_prediction, cross_entropy, squared_error};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::language::Vocabulary;
use crate::model::{Dropout, Inputs, Model, ModelConfig};
use crate::optim::{scale_grads, Adam};
use crate::params::{mix_seed, ParamStore};
use crate::synth::{render_features, Answer, Corpus, QaItem, Split, Template};
use crate::tensor::{Precision, Real};
use crate::video::{FeatureVolume, SubsetPolicy};

const DROPOUT_SALT: u64 = 0xd0;
const SHUFFLE_SALT: u64 = 0x5f;
const SUBSET_SALT: u64 = 0x5b;
const FRAME_SALT: u64 = 0xf4;

/// Corpus plus everything derived from it that training needs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub volumes: Vec<FeatureVolume>,
    pub tokens: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Count(u32),
}

impl Dataset {
    /// Answer labels cover every classification answer in the corpus; counts go to the regression head.
    pub fn new(corpus: Corpus, volumes: Vec<FeatureVolume>) -> Result<Self> {
        if volumes.len() != corpus.scenes.len() {
            return Err(Error::Ingestion(format!(
                "{} volumes for {} scenes",
                volumes.len(),
                corpus.scenes.len()
            )));
        }
        let labels: Vec<String> = corpus
            .items
            .iter()
            .filter(|it| !it.task.is_regression())
            .map(|it| it.answer.to_string())
            .collect();
        let vocab = Vocabulary::build(
            corpus.items.iter().map(|it| it.question_tokens.as_slice()),
            labels.iter().map(String::as_str),
        );
        let tokens = corpus.items.iter().map(|it| vocab.encode(&it.question_tokens)).collect();
        Ok(Dataset {
            corpus,
            vocab,
            volumes,
            tokens,
        })
    }

    /// Renders volumes in memory instead of reading them from disk.
    pub fn from_corpus(corpus: Corpus) -> Result<Self> {
        let volumes = corpus.scenes.iter().map(render_features).collect();
        Self::new(corpus, volumes)
    }

    pub fn load(dir: &Path, workers: usize) -> Result<Self> {
        let corpus = Corpus::load(dir)?;
        let volumes = corpus.load_volumes(dir, workers)?;
        Self::new(corpus, volumes)
    }

    pub fn item(&self, i: usize) -> &QaItem {
        &self.corpus.items[i]
    }

    pub fn target(&self, i: usize) -> Result<Target> {
        let it = self.item(i);
        match (&it.answer, it.task.is_regression()) {
            (Answer::Count(n), true) => Ok(Target::Count(*n)),
            (a, false) => self
                .vocab
                .answer_index(&a.to_string())
                .map(Target::Class)
                .ok_or_else(|| Error::Ingestion(format!("answer `{a}` not in label set"))),
            (a, true) => Err(Error::Ingestion(format!("count item {} has answer `{a}`", it.id))),
        }
    }

    /// Item indices of `split`, restricted to the configured tasks and limit.
    pub fn split_items(&self, split: Split, cfg: &RunConfig) -> Vec<usize> {
        let of = self.corpus.split_of();
        let mut v: Vec<usize> = self
            .corpus
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| of.get(&it.scene_id) == Some(&split))
            .filter(|(_, it)| cfg.tasks.is_empty() || cfg.tasks.contains(&it.task))
            .map(|(i, _)| i)
            .collect();
        if cfg.limit > 0 {
            v.truncate(cfg.limit);
        }
        v
    }

    pub fn model_config(&self, cfg: &RunConfig) -> ModelConfig {
        let m = &self.corpus.manifest;
        let longest = self.tokens.iter().map(Vec::len).max().unwrap_or(1);
        ModelConfig {
            variant: cfg.variant,
            vocab_size: self.vocab.len(),
            answers: self.vocab.num_answers(),
            embed_dim: cfg.embed_dim,
            dim: cfg.dim,
            steps: cfg.steps,
            clips: cfg.clips,
            clip_len: cfg.effective_clip_len(),
            max_order: cfg.max_order,
            sampled_frames: cfg.frames,
            feature_dim: m.depth,
            cells: m.width * m.height,
            max_len: cfg.max_len.max(longest),
        }
    }

    /// Frame shown to the single-frame variants; fixed per item.
    pub fn frame_for(&self, seed: u64, i: usize) -> usize {
        let n = self.volumes[self.item(i).scene_id].num_frames();
        (mix_seed(seed ^ FRAME_SALT, self.item(i).id as u64) % n as u64) as usize
    }
}

/// Model, its parameters, and the data it runs on.
pub struct Session<'a, F: Real> {
    pub cfg: &'a RunConfig,
    pub data: &'a Dataset,
    pub model: Model,
    pub store: ParamStore<F>,
}

/// Subset sampling used at evaluation time.
pub fn eval_policy(cfg: &RunConfig) -> SubsetPolicy {
    SubsetPolicy::Capped {
        cap: cfg.subset_cap,
        seed: cfg.seed,
    }
}

impl<'a, F: Real> Session<'a, F> {
    pub fn new(cfg: &'a RunConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let model = Model::new(&mut store, data.model_config(cfg))?;
        Ok(Session {
            cfg,
            data,
            model,
            store,
        })
    }

    /// Forward pass and loss for one item; backpropagates into the store when `train` is set.
    pub fn run_item(
        &mut self,
        i: usize,
        policy: &SubsetPolicy,
        train: Option<&mut ChaCha8Rng>,
    ) -> Result<Prediction> {
        let data = self.data;
        let it = data.item(i);
        let target = data.target(i)?;
        let mut g = Graph::<F>::new();
        let inputs = Inputs {
            tokens: &data.tokens[i],
            volume: &data.volumes[it.scene_id],
            frame: data.frame_for(self.cfg.seed, i),
        };
        let backprop = train.is_some();
        let drop = train.map(|rng| Dropout {
            rate: self.cfg.dropout,
            rng,
        });
        let f = self.model.forward(&mut g, &self.store, &inputs, policy, drop)?;
        let (loss, correct, squared_error) = match target {
            Target::Class(c) => {
                let logits = self.model.open_ended.logits(&mut g, &self.store, f.memory, f.question)?;
                let pred = crate::decoders::argmax(&g.value(logits).to_f64());
                (cross_entropy(&mut g, logits, c)?, pred == c, None)
            }
            Target::Count(n) => {
                let s = self.model.count.score(&mut g, &self.store, f.memory, f.question)?;
                let pred = count_prediction(g.value(s).item().f64());
                let err = (pred as f64 - n as f64).powi(2);
                (squared_error(&mut g, s, n as f64)?, pred == n as usize, Some(err))
            }
        };
        let loss_value = g.value(loss).item().f64();
        if backprop {
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: 0,
                    step: 0,
                    detail: format!("item {} ({}) loss {loss_value}", it.id, it.template.task()),
                });
            }
            g.backward(loss)?;
            g.flush_param_grads(&mut self.store);
        }
        Ok(Prediction {
            item: i,
            task: it.task,
            template: it.template,
            correct,
            squared_error,
            loss: loss_value,
        })
    }

    pub fn evaluate_items(&mut self, items: &[usize], policy: &SubsetPolicy) -> Result<Vec<Prediction>> {
        items.iter().map(|&i| self.run_item(i, policy, None)).collect()
    }

    pub fn evaluate(&mut self, split: Split, epoch: usize) -> Result<MetricsRecord> {
        let start = Instant::now();
        let items = self.data.split_items(split, self.cfg);
        let preds = self.evaluate_items(&items, &eval_policy(self.cfg))?;
        MetricsRecord::from_predictions(epoch, split, &preds, start.elapsed().as_secs_f64())
    }

    /// One optimizer step over `batch`; returns the per-item outcomes.
    pub fn train_batch(
        &mut self,
        opt: &mut Adam<F>,
        batch: &[usize],
        policy: &SubsetPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Prediction>> {
        self.store.zero_grad();
        let preds = batch
            .iter()
            .map(|&i| self.run_item(i, policy, Some(rng)))
            .collect::<Result<Vec<_>>>()?;
        scale_grads(&mut self.store, 1.0 / batch.len() as f64);
        opt.step(&mut self.store);
        Ok(preds)
    }
}

pub struct TrainOutcome<F: Real> {
    pub store: ParamStore<F>,
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub test: MetricsRecord,
}

/// Trains for `cfg.epochs`, keeping the parameters of the best validation epoch
/// (earliest on ties), then evaluates them on the test split.
pub fn train_on<F: Real>(
    cfg: &RunConfig,
    data: &Dataset,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome<F>> {
    let mut s = Session::<F>::new(cfg, data)?;
    let train_items = data.split_items(Split::Train, cfg);
    if train_items.is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    let mut opt = Adam::new(cfg.learning_rate());
    opt.weight_decay = cfg.weight_decay;
    opt.grad_clip = cfg.grad_clip;

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<F>)> = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order = train_items.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ SHUFFLE_SALT, epoch as u64)));
        let policy = SubsetPolicy::Capped {
            cap: cfg.subset_cap,
            seed: mix_seed(cfg.seed ^ SUBSET_SALT, epoch as u64),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ DROPOUT_SALT, epoch as u64));
        let mut preds = Vec::with_capacity(order.len());
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let out = s.train_batch(&mut opt, batch, &policy, &mut rng).map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { epoch, step, detail },
                e => e,
            })?;
            preds.extend(out);
        }
        let train_rec = MetricsRecord::from_predictions(epoch, Split::Train, &preds, start.elapsed().as_secs_f64())?;
        sink(&train_rec)?;
        records.push(train_rec);
        let val = s.evaluate(Split::Val, epoch)?;
        sink(&val)?;
        if best.as_ref().is_none_or(|(acc, _, _)| val.accuracy > *acc) {
            best = Some((val.accuracy, epoch, s.store.clone()));
        }
        records.push(val);
    }
    let best_epoch = match best {
        Some((_, e, store)) => {
            s.store = store;
            e
        }
        None => 0,
    };
    let test = s.evaluate(Split::Test, best_epoch)?;
    sink(&test)?;
    records.push(test.clone());
    Ok(TrainOutcome {
        store: s.store,
        model: s.model,
        records,
        best_epoch,
        test,
    })
}

/// Summary of a finished run written under `cfg.out`.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out: PathBuf,
    pub best_epoch: usize,
    pub records: Vec<MetricsRecord>,
    pub test: MetricsRecord,
}

pub const CHECKPOINT_FILE: &str = "model.dpvq";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

fn train_precision<F: Real>(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let mut metrics = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join(METRICS_FILE))?,
    );
    let outcome = train_on::<F>(cfg, data, |r| {
        r.write_jsonl(&mut metrics)?;
        metrics.flush()?;
        Ok(())
    })?;
    let text = cfg.to_text();
    Checkpoint::from_store(&outcome.store, cfg.model_hash(), text.clone()).save(&out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(CONFIG_FILE), text)?;
    Ok(RunSummary {
        out: out.to_path_buf(),
        best_epoch: outcome.best_epoch,
        records: outcome.records,
        test: outcome.test,
    })
}

/// Trains on `data` and writes checkpoint, config and metrics under `cfg.out`.
pub fn train_to_dir(cfg: &RunConfig, data: &Dataset) -> Result<RunSummary> {
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("`out` is not set".into()))?;
    match cfg.precision {
        Precision::F32 => train_precision::<f32>(cfg, data, &out),
        Precision::F64 => train_precision::<f64>(cfg, data, &out),
    }
}

/// Loads the corpus named in the config and trains.
pub fn train(cfg: &RunConfig) -> Result<RunSummary> {
    let dir = cfg
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("`corpus` is not set".into()))?;
    let data = Dataset::load(&dir, cfg.workers)?;
    train_to_dir(cfg, &data)
}

/// Restores a checkpoint against `data` and evaluates one split.
pub fn evaluate_checkpoint_on(ck: &Checkpoint, data: &Dataset, split: Split) -> Result<MetricsRecord> {
    let cfg = RunConfig::parse_str(&ck.config_text)?;
    if cfg.model_hash() != ck.config_hash {
        return Err(Error::Ingestion("checkpoint config hash does not match its config".into()));
    }
    match cfg.precision {
        Precision::F32 => eval_precision::<f32>(&cfg, ck, data, split),
        Precision::F64 => eval_precision::<f64>(&cfg, ck, data, split),
    }
}

fn eval_precision<F: Real>(cfg: &RunConfig, ck: &Checkpoint, data: &Dataset, split: Split) -> Result<MetricsRecord> {
    let mut s = Session::<F>::new(cfg, data)?;
    ck.restore_into(&mut s.store)?;
    s.evaluate(split, 0)
}

/// `eval` entry point; `corpus` overrides the path stored in the checkpoint.
pub fn evaluate_checkpoint(path: &Path, split: Split, corpus: Option<&Path>) -> Result<MetricsRecord> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::parse_str(&ck.config_text)?;
    let dir = corpus
        .map(Path::to_path_buf)
        .or(cfg.corpus.clone())
        .ok_or_else(|| Error::Config("checkpoint names no corpus; pass one".into()))?;
    let data = Dataset::load(&dir, cfg.workers)?;
    evaluate_checkpoint_on(&ck, &data, split)
}

/// Writes records as JSON lines.
pub fn write_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        r.write_jsonl(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-template majority answer fitted on `fit`, scored on `eval`. Ties pick the smallest label.
pub fn majority_predictions(data: &Dataset, fit: &[usize], eval: &[usize]) -> Vec<Prediction> {
    let mut counts: BTreeMap<Template, BTreeMap<String, usize>> = BTreeMap::new();
    for &i in fit {
        let it = data.item(i);
        *counts.entry(it.template).or_default().entry(it.answer.to_string()).or_default() += 1;
    }
    let majority: BTreeMap<Template, String> = counts
        .into_iter()
        .filter_map(|(t, c)| {
            let top = *c.values().max()?;
            c.into_iter().find(|(_, n)| *n == top).map(|(a, _)| (t, a))
        })
        .collect();
    eval.iter()
        .map(|&i| {
            let it = data.item(i);
            let guess = majority.get(&it.template);
            let correct = guess == Some(&it.answer.to_string());
            let squared_error = match (&it.answer, it.task.is_regression()) {
                (Answer::Count(n), true) => {
                    let g: f64 = guess.and_then(|s| s.parse().ok()).unwrap_or(0.0);
                    Some((g - *n as f64).powi(2))
                }
                _ => None,
            };
            Prediction {
                item: i,
                task: it.task,
                template: it.template,
                correct,
                squared_error,
                loss: 0.0,
            }
        })
        .collect()
}
