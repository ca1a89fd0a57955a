//! Training loop, checkpoints and feature extraction.
//!
//! Batch composition depends only on `(seed, epoch)` and augmentation only
//! on `(seed, step)`, so a resumed run replays the same batches as an
//! uninterrupted one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::{Graph, Mode};
use crate::data::{augment_batch, mask_modalities, pk_sample, AugmentConfig, LoadedDataset};
use crate::error::{DemoError, Result};
use crate::evaluation::{evaluate, EvalOptions, FeatureSet, RetrievalResult};
use crate::losses::{LossBreakdown, STREAMS};
use crate::modality::Modality;
use crate::model::{build_model, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig, LearningRates};
use crate::parallel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps (0: no cap).
    pub max_steps: usize,
    pub base_lr: f64,
    pub encoder_lr: f64,
    pub weight_decay: f64,
    /// Cosine decay of both learning rates over the run.
    pub cosine: bool,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    /// Instances per identity held out for validation (0: validate on the
    /// training set).
    pub val_per_identity: usize,
    /// Evaluate every this many epochs (0: only after the last step).
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            max_steps: 0,
            base_lr: 3.5e-4,
            encoder_lr: 5e-6,
            weight_decay: 1e-4,
            cosine: false,
            p: 8,
            k: 8,
            seed: 0,
            val_per_identity: 1,
            eval_every: 1,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.k < 2 {
            return Err(DemoError::Config("P must be positive and K at least 2".into()));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return Err(DemoError::Config("epochs or max_steps must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.encoder_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(DemoError::Config("learning rates and weight decay must be >= 0".into()));
        }
        if self.eval_batch == 0 {
            return Err(DemoError::Config("eval_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, one TOML section per field.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: LearningRates,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochEval {
    pub epoch: usize,
    pub step: usize,
    pub map: f64,
    pub rank1: f64,
}

pub const STEP_LOG_HEADER: &str = "step\tepoch\tlr_module\tlr_encoder\ttotal";
pub const EVAL_LOG_HEADER: &str = "epoch\tstep\tmAP\tRank-1";

fn step_log_header() -> String {
    let mut h = STEP_LOG_HEADER.to_string();
    for kind in ["ce", "tri"] {
        for s in STREAMS {
            let _ = write!(h, "\t{kind}_{s}");
        }
    }
    h
}

fn step_log_line(l: &StepLog) -> String {
    let mut s = format!(
        "{}\t{}\t{:e}\t{:e}\t{:.9}",
        l.step, l.epoch, l.lr.module, l.lr.encoder, l.loss.total
    );
    for v in l.loss.ce.iter().chain(&l.loss.triplet) {
        let _ = write!(s, "\t{v:.9}");
    }
    s
}

fn append(path: &Path, header: &str, line: &str) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| DemoError::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(header);
        text.push('\n');
    }
    text.push_str(line);
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| DemoError::io(path, e))
}

/// Train/validation entry indices.
pub fn split_indices(data: &LoadedDataset, val_per_identity: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (id, idx) in data.by_identity() {
        if val_per_identity > 0 && idx.len() <= val_per_identity {
            return Err(DemoError::Config(format!(
                "identity {id} has {} instances, cannot hold out {val_per_identity}",
                idx.len()
            )));
        }
        let cut = idx.len() - val_per_identity;
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Eval-mode descriptors of `indices` with the given modalities zeroed.
pub fn extract_features(model: &Model, data: &LoadedDataset, indices: &[usize], missing: &[Modality], batch: usize) -> Result<FeatureSet> {
    let chunks: Vec<&[usize]> = indices.chunks(batch.max(1)).collect();
    let parts: Vec<Result<Vec<Vec<f64>>>> = parallel::map_slice(&chunks, |chunk| {
        let b = mask_modalities(&data.batch(chunk), missing)?;
        let d = model.descriptors(&b)?;
        Ok((0..d.rows()).map(|r| d.row(0, r).to_vec()).collect())
    });
    let mut features = Vec::with_capacity(indices.len());
    for p in parts {
        features.extend(p?);
    }
    let ids = indices.iter().map(|&i| data.index.entries[i].id).collect();
    let cams = indices.iter().map(|&i| data.index.entries[i].cam).collect();
    FeatureSet::new(features, ids, cams)
}

/// Features plus run metadata, ready to save.
pub fn feature_archive(fs: &FeatureSet, model: &Model, missing: &[Modality]) -> Archive {
    let mut a = fs.to_archive();
    a.meta.insert("model_fingerprint".into(), model.config.fingerprint());
    let miss: Vec<&str> = missing.iter().map(|m| m.label()).collect();
    a.meta.insert("missing".into(), miss.join("+"));
    a
}

/// Retrieval on `query` against `gallery` entries of one dataset.
pub fn evaluate_split(
    model: &Model,
    data: &LoadedDataset,
    query: &[usize],
    gallery: &[usize],
    missing: &[Modality],
    opts: &EvalOptions,
    batch: usize,
) -> Result<RetrievalResult> {
    let q = extract_features(model, data, query, missing, batch)?;
    let g = if query == gallery {
        q.clone()
    } else {
        extract_features(model, data, gallery, missing, batch)?
    };
    evaluate(&q, &g, opts)
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
    pub best_map: f64,
    /// Dataset identity to class index.
    pub labels: BTreeMap<usize, usize>,
    pub log: Vec<StepLog>,
    pub evals: Vec<EpochEval>,
}

fn batch_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_add(1)
}

impl Trainer {
    pub fn new(config: &RunConfig, data: &LoadedDataset) -> Result<Self> {
        config.validate()?;
        let (train, _) = split_indices(data, config.train.val_per_identity)?;
        let labels: BTreeMap<usize, usize> = train
            .iter()
            .map(|&i| data.index.entries[i].id)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(c, id)| (id, c))
            .collect();
        let model = build_model(&config.model, labels.len())?;
        if model.config.num_classes < labels.len() {
            return Err(DemoError::Config(format!(
                "num_classes {} is smaller than the {} training identities",
                model.config.num_classes,
                labels.len()
            )));
        }
        let adam = Adam::new(&model.store, Self::adam_config(config));
        Ok(Trainer {
            config: config.clone(),
            model,
            adam,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            best_map: f64::NEG_INFINITY,
            labels,
            log: Vec::new(),
            evals: Vec::new(),
        })
    }

    fn adam_config(config: &RunConfig) -> AdamConfig {
        AdamConfig {
            weight_decay: config.train.weight_decay,
            ..AdamConfig::default()
        }
    }

    fn total_steps(&self, batches_per_epoch: usize) -> usize {
        let by_epochs = self.config.train.epochs * batches_per_epoch;
        match self.config.train.max_steps {
            0 => by_epochs,
            m if self.config.train.epochs == 0 => m,
            m => m.min(by_epochs),
        }
    }

    fn rates(&self, total: usize) -> LearningRates {
        let t = &self.config.train;
        let f = if t.cosine && total > 0 {
            0.5 * (1.0 + (std::f64::consts::PI * self.step as f64 / total as f64).cos())
        } else {
            1.0
        };
        LearningRates {
            encoder: t.encoder_lr * f,
            module: t.base_lr * f,
        }
    }

    /// One optimizer step on the given dataset entries.
    pub fn train_step(&mut self, data: &LoadedDataset, indices: &[usize], lr: LearningRates) -> Result<LossBreakdown> {
        let seed = batch_seed(self.config.train.seed, self.step);
        let batch = augment_batch(&data.batch(indices), &self.config.augment, seed);
        let labels: Vec<usize> = batch.ids.iter().map(|id| self.labels[id]).collect();
        let (grads, breakdown, updates) = {
            let mut g = Graph::new(&self.model.store, Mode::Train);
            let out = self.model.net.forward(&mut g, &batch, false)?;
            let loss = self.model.net.loss(&mut g, &out, &labels, &self.model.config.loss)?;
            let breakdown = loss.breakdown(&g);
            if !breakdown.total.is_finite() {
                return Err(DemoError::NonFiniteLoss {
                    step: self.step,
                    batch_seed: seed,
                    detail: format!("loss terms {breakdown:?} on entries {indices:?}"),
                });
            }
            let grads = g.backward(loss.total);
            (grads, breakdown, g.take_buffer_updates())
        };
        self.adam.update(&mut self.model.store, &grads, lr);
        for (id, v) in updates {
            *self.model.store.value_mut(id) = v;
        }
        self.step += 1;
        Ok(breakdown)
    }

    fn validate_now(&self, data: &LoadedDataset) -> Result<RetrievalResult> {
        let (train, val) = split_indices(data, self.config.train.val_per_identity)?;
        let query = if val.is_empty() { &train } else { &val };
        evaluate_split(&self.model, data, query, &train, &[], &self.config.eval, self.config.train.eval_batch)
    }

    /// Run until the configured epochs / step cap. With `out`, logs and
    /// `best.ckpt` / `last.ckpt` are written there.
    pub fn run(&mut self, data: &LoadedDataset, out: Option<&Path>) -> Result<()> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| DemoError::io(dir, e))?;
        }
        let (train, _) = split_indices(data, self.config.train.val_per_identity)?;
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &train {
            groups.entry(data.index.entries[i].id).or_default().push(i);
        }
        let t = self.config.train.clone();
        let per_epoch = pk_sample(&groups, t.p, t.k, t.seed, 0)?.len();
        let total = self.total_steps(per_epoch);
        let epochs = if t.epochs == 0 { total.div_ceil(per_epoch) } else { t.epochs };
        while self.epoch < epochs && self.step < total {
            let batches = pk_sample(&groups, t.p, t.k, t.seed, self.epoch)?;
            while self.batch_in_epoch < batches.len() && self.step < total {
                let lr = self.rates(total);
                let loss = match self.train_step(data, &batches[self.batch_in_epoch], lr) {
                    Err(e @ DemoError::NonFiniteLoss { .. }) => {
                        if let Some(dir) = out {
                            let p = dir.join("nonfinite_batch.txt");
                            fs::write(&p, format!("{e}\n")).map_err(|io| DemoError::io(&p, io))?;
                        }
                        return Err(e);
                    }
                    r => r?,
                };
                self.batch_in_epoch += 1;
                let entry = StepLog {
                    step: self.step,
                    epoch: self.epoch,
                    lr,
                    loss,
                };
                if let Some(dir) = out {
                    append(&dir.join("train_log.tsv"), &step_log_header(), &step_log_line(&entry))?;
                }
                self.log.push(entry);
            }
            let finished_epoch = self.batch_in_epoch >= batches.len();
            let last = self.step >= total;
            if finished_epoch {
                self.epoch += 1;
                self.batch_in_epoch = 0;
            }
            let due = t.eval_every > 0 && finished_epoch && self.epoch % t.eval_every == 0;
            if due || last {
                self.record_eval(data, out)?;
            }
            if let Some(dir) = out {
                self.save(&dir.join("last.ckpt"))?;
            }
        }
        Ok(())
    }

    fn record_eval(&mut self, data: &LoadedDataset, out: Option<&Path>) -> Result<()> {
        if self.evals.last().is_some_and(|e| e.step == self.step) {
            return Ok(());
        }
        let r = self.validate_now(data)?;
        let e = EpochEval {
            epoch: self.epoch,
            step: self.step,
            map: r.map,
            rank1: r.rank(1),
        };
        if let Some(dir) = out {
            append(
                &dir.join("eval_log.tsv"),
                EVAL_LOG_HEADER,
                &format!("{}\t{}\t{:.6}\t{:.6}", e.epoch, e.step, e.map, e.rank1),
            )?;
        }
        if e.map > self.best_map {
            self.best_map = e.map;
            if let Some(dir) = out {
                self.save(&dir.join("best.ckpt"))?;
            }
        }
        self.evals.push(e);
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = self.model.to_archive();
        self.adam.write_state(&self.model.store, &mut a);
        let meta = &mut a.meta;
        meta.insert("run_config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        meta.insert("step".into(), self.step.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("batch_in_epoch".into(), self.batch_in_epoch.to_string());
        meta.insert("best_map".into(), format!("{:e}", self.best_map));
        a.insert_i64("label_ids", self.labels.keys().map(|&i| i as i64).collect());
        a
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let get = |k: &str| -> Result<&String> {
            a.meta.get(k).ok_or_else(|| DemoError::Checkpoint(format!("checkpoint lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| DemoError::Checkpoint(format!("bad {k}")))
        };
        let config: RunConfig = serde_json::from_str(get("run_config")?)
            .map_err(|e| DemoError::Checkpoint(format!("bad run_config: {e}")))?;
        let model = Model::from_archive(a)?;
        let adam = Adam::read_state(&model.store, Self::adam_config(&config), a)?;
        let labels = a
            .i64s("label_ids")?
            .iter()
            .enumerate()
            .map(|(c, &id)| (id as usize, c))
            .collect();
        Ok(Trainer {
            model,
            adam,
            step: num("step")?,
            epoch: num("epoch")?,
            batch_in_epoch: num("batch_in_epoch")?,
            best_map: get("best_map")?
                .parse()
                .map_err(|_| DemoError::Checkpoint("bad best_map".into()))?,
            labels,
            log: Vec::new(),
            evals: Vec::new(),
            config,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Train a fresh model.
pub fn train(config: &RunConfig, data: &LoadedDataset, out: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(config, data)?;
    // a fresh run starts fresh logs
    if let Some(dir) = out {
        for f in ["train_log.tsv", "eval_log.tsv", "nonfinite_batch.txt"] {
            let p = dir.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| DemoError::io(&p, e))?;
            }
        }
    }
    t.run(data, out)?;
    Ok(t)
}

/// Continue from a checkpoint, optionally with a new step cap / epoch count.
pub fn resume(checkpoint: &Path, data: &LoadedDataset, out: Option<&Path>, max_steps: Option<usize>, epochs: Option<usize>) -> Result<Trainer> {
    let mut t = Trainer::load(checkpoint)?;
    if let Some(m) = max_steps {
        t.config.train.max_steps = m;
    }
    if let Some(e) = epochs {
        t.config.train.epochs = e;
    }
    t.run(data, out)?;
    Ok(t)
}
