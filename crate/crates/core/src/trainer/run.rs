//! Training and evaluation drivers: pretrain, finetune, evaluate, ablate.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::Graph;
use crate::data::{Dataset, EventSequence};
use crate::downstream::classify::{classify_batch_loss, classify_many, init_classifier_head, labels_of};
use crate::downstream::impute::{impute_batch_loss, impute_metrics, impute_with, init_impute_heads, select_missing};
use crate::downstream::tpp::{evaluate_tpp, init_tpp_head, tpp_batch_loss, TppEvalOptions};
use crate::downstream::{auc, Task};
use crate::embedding::project_embedding_params;
use crate::encoder::init_backbone;
use crate::error::{Error, Result};
use crate::params::{checkpoint_bytes, parse_checkpoint, ParamStore};

use super::config::{PretextLossWeights, TrainConfig};
use super::optim::Adam;
use super::pretext::{init_pretext_heads, pretext_step, PretextLoss, SkipCounts};

/// Times are shifted so every sequence starts at or after this instant.
pub const MIN_FIRST_TIME: f64 = 1.0;

const HEAD_STREAM: u64 = 0x4845_4144;
const EVAL_STREAM: u64 = 0x4556_414c;

/// Parameters with the data statistics needed to use them.
#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    /// Mean inter-event interval of the training data.
    pub mean_interval: f64,
    /// Largest event time of the training data; imputation times are
    /// regressed in units of this scale.
    pub time_scale: f64,
}

impl Trained {
    pub fn horizon(&self) -> f64 {
        self.config.tpp.horizon_factor * self.mean_interval
    }

    pub fn metadata(&self, kind: &str) -> Value {
        json!({
            "kind": kind,
            "config": Value::Object(self.config.to_dotted()),
            "mean_interval": self.mean_interval,
            "time_scale": self.time_scale,
        })
    }

    pub fn to_bytes(&self, kind: &str) -> Vec<u8> {
        checkpoint_bytes(&self.params, &self.metadata(kind))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = parse_checkpoint(bytes)?;
        let config = TrainConfig::from_json(&meta["config"])?;
        let num = |k: &str| {
            meta[k]
                .as_f64()
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {k}")))
        };
        Ok(Trained {
            config,
            params,
            mean_interval: num("mean_interval")?,
            time_scale: num("time_scale")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, kind: &str) -> Result<()> {
        std::fs::write(path, self.to_bytes(kind))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Shifts times so that `t_1 >= 1`.
pub fn prepare(data: &Dataset) -> Result<Dataset> {
    data.shift_to_min_first(MIN_FIRST_TIME)
}

fn stats(data: &Dataset) -> Result<(f64, f64)> {
    let mean = data
        .mean_interval()
        .ok_or_else(|| Error::EmptyBatch("training data has no inter-event interval".into()))?;
    let scale = data.max_time().unwrap_or(1.0).max(1e-12);
    Ok((mean, scale))
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

fn pick(data: &Dataset, idx: &[usize]) -> Vec<EventSequence> {
    idx.iter().map(|&i| data.sequences()[i].clone()).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: PretextLoss,
    pub steps: usize,
    pub skipped_batches: usize,
    pub skipped: SkipCounts,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Trained,
    pub epochs: Vec<EpochLoss>,
}

impl PretrainOutcome {
    pub fn manifest(&self) -> Value {
        json!({
            "kind": "pretrain",
            "seed": self.model.config.train.seed,
            "config": Value::Object(self.model.config.to_dotted()),
            "epochs": self.epochs,
        })
    }
}

/// Pretext training on `train`.
pub fn pretrain(cfg: &TrainConfig, train: &Dataset) -> Result<PretrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.embedding.num_types = train.num_types();
    cfg.validate()?;
    let data = prepare(train)?;
    let data = if cfg.train.pretext_fraction < 1.0 {
        data.subsample(cfg.train.pretext_fraction, cfg.train.seed)?
    } else {
        data
    };
    let (mean_interval, time_scale) = stats(&data)?;
    let seed = cfg.train.seed;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    init_backbone(&mut params, &cfg.model(), &mut init_rng)?;
    init_pretext_heads(&mut params, &cfg, &mut init_rng);
    let mut opt = Adam::new(cfg.train.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut step_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut epochs = Vec::with_capacity(cfg.train.pretext_epochs);
    for epoch in 1..=cfg.train.pretext_epochs {
        let mut acc = EpochLoss {
            epoch,
            ..EpochLoss::default()
        };
        for idx in batches(data.len(), cfg.train.batch_size, &mut order_rng) {
            let batch = pick(&data, &idx);
            match pretext_step(&mut params, &mut opt, &cfg, &batch, &mut step_rng) {
                Ok((l, skip)) => {
                    acc.loss.rec += l.rec;
                    acc.loss.cl += l.cl;
                    acc.loss.align += l.align;
                    acc.loss.total += l.total;
                    acc.steps += 1;
                    acc.skipped.add(skip);
                }
                Err(Error::EmptyBatch(_)) => acc.skipped_batches += 1,
                Err(e) => return Err(e),
            }
        }
        let n = acc.steps.max(1) as f64;
        acc.loss.rec /= n;
        acc.loss.cl /= n;
        acc.loss.align /= n;
        acc.loss.total /= n;
        if !acc.loss.total.is_finite() || !params.all_finite() {
            return Err(Error::Precondition(format!("pretext training diverged at epoch {epoch}")));
        }
        epochs.push(acc);
    }
    Ok(PretrainOutcome {
        model: Trained {
            config: cfg,
            params,
            mean_interval,
            time_scale,
        },
        epochs,
    })
}

/// Starting point of fine-tuning.
#[derive(Clone, Debug)]
pub enum Init<'a> {
    Scratch,
    Pretrained(&'a Trained),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Parameters of the best dev epoch.
    pub model: Trained,
    pub epochs: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub metric_name: &'static str,
}

impl FinetuneOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("epoch,train_loss,dev_{}\n", self.metric_name);
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.dev_metric);
        }
        s
    }

    pub fn manifest(&self) -> Value {
        json!({
            "kind": "finetune",
            "task": self.model.config.task.name(),
            "seed": self.model.config.train.seed,
            "config": Value::Object(self.model.config.to_dotted()),
            "best_epoch": self.best_epoch,
            "best_dev_metric": self.best_metric,
            "dev_metric": self.metric_name,
            "epochs": self.epochs,
        })
    }
}

/// Dev-set selection metric of a task, and whether larger is better.
pub fn dev_metric(model: &Trained, dev: &Dataset) -> Result<(f64, &'static str, bool)> {
    let cfg = &model.config;
    let seed = cfg.train.seed ^ EVAL_STREAM;
    match cfg.task {
        Task::Tpp => {
            let opts = TppEvalOptions {
                mc_samples: cfg.tpp.mc_samples,
                horizon: model.horizon(),
                term: cfg.tpp.event_term,
                seed,
                predictions: false,
            };
            let m = evaluate_tpp(&model.params, &cfg.model(), dev, &opts)?;
            Ok((m.nll, "nll", false))
        }
        Task::Classify => {
            let probs = classify_many(&model.params, &cfg.model(), dev.sequences())?;
            let labels = labels_of(dev.sequences())?;
            Ok((auc(&probs, &labels)?, "auc", true))
        }
        Task::Impute => {
            let r = impute_at_ratio(model, dev, cfg.impute.train_ratio, 1, seed)?;
            Ok((r.accuracy, "accuracy", true))
        }
    }
}

fn backbone_names(cfg: &TrainConfig) -> Result<ParamStore<f32>> {
    let mut s = ParamStore::new();
    init_backbone(&mut s, &cfg.model(), &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(s)
}

/// Checks that `pre` provides every backbone tensor `cfg` needs, with matching shapes.
pub fn check_compatible(pre: &Trained, cfg: &TrainConfig) -> Result<()> {
    for (name, m) in backbone_names(cfg)?.iter() {
        match pre.params.get(name) {
            Some(p) if p.shape() == m.shape() => {}
            Some(p) => {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{name}: checkpoint shape {:?}, model needs {:?}",
                    p.shape(),
                    m.shape()
                )))
            }
            None => return Err(Error::IncompatibleCheckpoint(format!("checkpoint lacks {name}"))),
        }
    }
    Ok(())
}

/// Fine-tunes for `cfg.task`, keeping the parameters of the best dev epoch.
pub fn finetune(cfg: &TrainConfig, train: &Dataset, dev: &Dataset, init: Init<'_>) -> Result<FinetuneOutcome> {
    let mut cfg = cfg.clone();
    cfg.embedding.num_types = train.num_types();
    if let Init::Pretrained(pre) = &init {
        // the backbone shape comes from the checkpoint
        cfg.embedding = pre.config.embedding.clone();
        cfg.encoder = pre.config.encoder.clone();
        if pre.config.embedding.num_types != train.num_types() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint has {} event types, data has {}",
                pre.config.embedding.num_types,
                train.num_types()
            )));
        }
        check_compatible(pre, &cfg)?;
    }
    cfg.validate()?;
    let train = prepare(train)?;
    let train = if cfg.train.train_fraction < 1.0 {
        train.subsample(cfg.train.train_fraction, cfg.train.seed)?
    } else {
        train
    };
    let dev = prepare(dev)?;
    let (mean_interval, time_scale) = stats(&train)?;
    let seed = cfg.train.seed;
    let d = cfg.encoder.d_model;
    let k = cfg.embedding.num_types;

    let mut params = match &init {
        Init::Scratch => {
            let mut p = ParamStore::new();
            init_backbone(&mut p, &cfg.model(), &mut ChaCha8Rng::seed_from_u64(seed))?;
            p
        }
        Init::Pretrained(pre) => {
            let mut p = pre.params.clone();
            p.remove_prefix("pretext.");
            p.remove_prefix("task.");
            p
        }
    };
    let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_STREAM);
    match cfg.task {
        Task::Tpp => init_tpp_head(&mut params, d, k, &mut head_rng),
        Task::Classify => {
            labels_of(train.sequences())?;
            labels_of(dev.sequences())?;
            init_classifier_head(&mut params, d, &mut head_rng)
        }
        Task::Impute => init_impute_heads(&mut params, d, k, &mut head_rng),
    }

    let mut model = Trained {
        config: cfg.clone(),
        params,
        mean_interval,
        time_scale,
    };
    let mut opt = Adam::new(cfg.train.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut step_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut epochs = Vec::with_capacity(cfg.train.finetune_epochs);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut metric_name = "";
    for epoch in 1..=cfg.train.finetune_epochs {
        let mut total = 0.0;
        let mut steps = 0usize;
        for idx in batches(train.len(), cfg.train.batch_size, &mut order_rng) {
            let batch = pick(&train, &idx);
            if let Some(l) = finetune_step(&mut model, &mut opt, &batch, &mut step_rng)? {
                total += l;
                steps += 1;
            }
        }
        if !model.params.all_finite() {
            return Err(Error::Precondition(format!("fine-tuning diverged at epoch {epoch}")));
        }
        let (metric, name, larger) = dev_metric(&model, &dev)?;
        metric_name = name;
        epochs.push(FinetuneEpoch {
            epoch,
            train_loss: total / steps.max(1) as f64,
            dev_metric: metric,
        });
        let better = match &best {
            None => true,
            Some((_, b, _)) => {
                if larger {
                    metric > *b
                } else {
                    metric < *b
                }
            }
        };
        if better && metric.is_finite() {
            best = Some((epoch, metric, model.params.clone()));
        }
    }
    let (best_epoch, best_metric) = match best {
        Some((e, m, p)) => {
            model.params = p;
            (e, m)
        }
        None => (0, f64::NAN),
    };
    Ok(FinetuneOutcome {
        model,
        epochs,
        best_epoch,
        best_metric,
        metric_name,
    })
}

/// One optimizer step on the task loss; `None` when the batch holds no usable sequence.
fn finetune_step(model: &mut Trained, opt: &mut Adam, batch: &[EventSequence], rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let cfg = &model.config;
    let mcfg = cfg.model();
    let mut g = Graph::<f32>::new();
    let loss = match cfg.task {
        Task::Tpp => {
            let seqs: Vec<EventSequence> = batch.iter().filter(|s| s.len() >= 2).cloned().collect();
            if seqs.is_empty() {
                return Ok(None);
            }
            let (l, n) = tpp_batch_loss(&mut g, &model.params, &mcfg, &seqs, cfg.tpp.mc_samples, cfg.tpp.event_term, rng)?;
            g.scale(l, 1.0 / n as f32)
        }
        Task::Classify => classify_batch_loss(&mut g, &model.params, &mcfg, batch)?,
        Task::Impute => {
            let mut seqs = Vec::new();
            let mut missing = Vec::new();
            for s in batch {
                if s.len() < 2 {
                    continue;
                }
                if let Ok(m) = select_missing(s, cfg.impute.train_ratio, rng) {
                    seqs.push(s.clone());
                    missing.push(m);
                }
            }
            if seqs.is_empty() {
                return Ok(None);
            }
            impute_batch_loss(&mut g, &model.params, &mcfg, &seqs, &missing, model.time_scale)?
        }
    };
    let value = f64::from(g.value(loss).item());
    let grads = g.backward(loss)?;
    let mut grads = g.param_grads(&grads);
    if cfg.train.freeze_backbone {
        grads.retain(|name, _| name.starts_with("task."));
    }
    opt.step(&mut model.params, &grads)?;
    project_embedding_params(&mut model.params);
    Ok(Some(value))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputeRatioRow {
    pub ratio: f64,
    pub accuracy: f64,
    pub rmse: f64,
    pub count: usize,
}

/// Imputation metrics over `draws` independent masks per sequence.
pub fn impute_at_ratio(model: &Trained, data: &Dataset, ratio: f64, draws: usize, seed: u64) -> Result<ImputeRatioRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mcfg = model.config.model();
    let (mut pt, mut tt, mut pm, mut tm) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..draws {
        for chunk in data.sequences().chunks(16) {
            let mut seqs = Vec::new();
            let mut missing = Vec::new();
            for s in chunk {
                if s.len() < 2 {
                    continue;
                }
                if let Ok(m) = select_missing(s, ratio, &mut rng) {
                    seqs.push(s.clone());
                    missing.push(m);
                }
            }
            if seqs.is_empty() {
                continue;
            }
            let r = impute_with(&model.params, &mcfg, &seqs, &missing, model.time_scale)?;
            pt.extend(r.type_predictions);
            tt.extend(r.true_types);
            pm.extend(r.time_predictions);
            tm.extend(r.true_times);
        }
    }
    if tt.is_empty() {
        return Err(Error::Precondition(format!("ratio {ratio} hides no event in the data")));
    }
    let m = impute_metrics(&pt, &tt, &pm, &tm);
    Ok(ImputeRatioRow {
        ratio,
        accuracy: m.accuracy,
        rmse: m.rmse,
        count: m.count,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub rows: Vec<(String, f64)>,
    pub impute_table: Vec<ImputeRatioRow>,
}

impl EvalReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == metric).map(|r| r.1)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("task,metric,value\n");
        for (m, v) in &self.rows {
            let _ = writeln!(s, "{},{},{}", self.task.name(), m, v);
        }
        s
    }

    pub fn impute_csv(&self) -> String {
        let mut s = String::from("ratio,accuracy,rmse,count\n");
        for r in &self.impute_table {
            let _ = writeln!(s, "{},{},{},{}", r.ratio, r.accuracy, r.rmse, r.count);
        }
        s
    }
}

/// Deterministic test metrics of a fine-tuned model on `data`.
pub fn evaluate(model: &Trained, data: &Dataset) -> Result<EvalReport> {
    let cfg = &model.config;
    if data.num_types() != cfg.embedding.num_types {
        return Err(Error::IncompatibleCheckpoint(format!(
            "model has {} event types, data has {}",
            cfg.embedding.num_types,
            data.num_types()
        )));
    }
    let data = prepare(data)?;
    let seed = cfg.train.seed ^ EVAL_STREAM;
    let mut rows = Vec::new();
    let mut impute_table = Vec::new();
    match cfg.task {
        Task::Tpp => {
            let opts = TppEvalOptions {
                mc_samples: cfg.tpp.mc_samples,
                horizon: model.horizon(),
                term: cfg.tpp.event_term,
                seed,
                predictions: true,
            };
            let m = evaluate_tpp(&model.params, &cfg.model(), &data, &opts)?;
            rows.push(("nll".into(), m.nll));
            rows.push(("rmse".into(), m.rmse));
            rows.push(("accuracy".into(), m.accuracy));
            rows.push(("events".into(), m.events as f64));
        }
        Task::Classify => {
            let probs = classify_many(&model.params, &cfg.model(), data.sequences())?;
            let labels = labels_of(data.sequences())?;
            let hits = probs
                .iter()
                .zip(&labels)
                .filter(|(p, &l)| u8::from(**p >= 0.5) == l)
                .count();
            rows.push(("auc".into(), auc(&probs, &labels)?));
            rows.push(("accuracy".into(), hits as f64 / labels.len() as f64));
        }
        Task::Impute => {
            for (i, &r) in cfg.impute.eval_ratios.iter().enumerate() {
                let draws = (cfg.impute.eval_draws / r).ceil().max(1.0) as usize;
                impute_table.push(impute_at_ratio(model, &data, r, draws, seed.wrapping_add(i as u64))?);
            }
            let main = impute_at_ratio(model, &data, cfg.impute.train_ratio, 1, seed)?;
            rows.push(("accuracy".into(), main.accuracy));
            rows.push(("rmse".into(), main.rmse));
        }
    }
    Ok(EvalReport {
        task: cfg.task,
        rows,
        impute_table,
    })
}

/// One variant of the pretext-task ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub rec: bool,
    pub cl: bool,
    pub align: bool,
    pub dev_metric: f64,
    pub metric: String,
}

/// The seven non-empty subsets of the three pretext objectives, plus scratch.
pub fn ablation_variants() -> Vec<(String, Option<PretextLossWeights>)> {
    let mut out = vec![("scratch".to_string(), None)];
    for mask in 1..8u8 {
        let on = |b: u8| mask & b != 0;
        let names: Vec<&str> = [(1, "rec"), (2, "cl"), (4, "align")]
            .iter()
            .filter(|(b, _)| on(*b))
            .map(|(_, n)| *n)
            .collect();
        let w = PretextLossWeights {
            alpha: if on(1) { 1.0 } else { 0.0 },
            beta: if on(2) { 1.0 } else { 0.0 },
            gamma: if on(4) { 1.0 } else { 0.0 },
        };
        out.push((names.join("+"), Some(w)));
    }
    out
}

pub fn ablate(cfg: &TrainConfig, train: &Dataset, dev: &Dataset) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (variant, weights) in ablation_variants() {
        let outcome = match weights {
            None => finetune(cfg, train, dev, Init::Scratch)?,
            Some(w) => {
                let mut c = cfg.clone();
                c.loss = w;
                let pre = pretrain(&c, train)?;
                finetune(cfg, train, dev, Init::Pretrained(&pre.model))?
            }
        };
        let w = weights.unwrap_or(PretextLossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        });
        rows.push(AblationRow {
            variant,
            rec: w.alpha > 0.0,
            cl: w.beta > 0.0,
            align: w.gamma > 0.0,
            dev_metric: outcome.best_metric,
            metric: outcome.metric_name.to_string(),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,rec,cl,align,metric,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.variant, r.rec, r.cl, r.align, r.metric, r.dev_metric);
    }
    s
}

/// Median ignoring NaN entries.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
