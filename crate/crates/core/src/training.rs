//! Adam with global-norm clipping, class weights, early stopping and the
//! pretrain → head swap → freeze/fine-tune protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info};
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation;
use crate::grad::Tensor;
use crate::model::{self, Mode, Model, TaskHead, Target, is_encoder_param};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Random initialization.
    Rd,
    /// Transferred encoder, frozen.
    TlFr,
    /// Transferred encoder, fine-tuned.
    TlFt,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rd" => Ok(TrainMode::Rd),
            "tl-fr" => Ok(TrainMode::TlFr),
            "tl-ft" => Ok(TrainMode::TlFt),
            _ => Err(Error::invalid(format!("unknown training mode {s:?} (expected rd, tl-fr or tl-ft)"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Rd => "rd",
            TrainMode::TlFr => "tl-fr",
            TrainMode::TlFt => "tl-ft",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub clip_norm: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            clip_norm: 1.0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            mode: TrainMode::Rd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            return Err(Error::invalid("lr and eps must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// An encoded training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub indices: Vec<usize>,
    pub target: Target,
}

/// `T / (k · count_c)` for each class `c`.
pub fn class_weights(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("class_weights needs k ≥ 1"));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {c} does not occur in the training labels")));
    }
    let total = labels.len() as f64;
    Ok(counts.iter().map(|&n| total / (k as f64 * n as f64)).collect())
}

pub fn global_norm(grads: &[(String, Tensor)]) -> f64 {
    grads.iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt()
}

/// Rescales all tensors together when their joint L2 norm exceeds
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(String, Tensor)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update of the parameters named in `grads`;
/// everything else is left untouched.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &[(String, Tensor)],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name:?}")))?;
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient for {name:?} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for i in 0..g.len() {
            let gi = g.data()[i];
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// `None` when the metric is undefined, e.g. constant predictions.
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub metric: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,dev_loss,dev_metric")?;
        for r in &self.epochs {
            let metric = r.dev_metric.map_or_else(|| "nan".to_string(), |m| m.to_string());
            writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.dev_loss, metric)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noise/dropout seed of the `step`-th example of `epoch`.
fn example_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    mix(mix(seed ^ mix(epoch as u64)) ^ step as u64)
}

/// Names of the tensors a training run may update.
pub fn trainable_params(model: &Model, mode: TrainMode) -> Vec<String> {
    let frozen = model.frozen_encoder || mode == TrainMode::TlFr;
    model
        .params()
        .keys()
        .filter(|n| !(frozen && is_encoder_param(n)))
        .cloned()
        .collect()
}

fn weights_for(model: &Model, train: &[Example]) -> Result<Option<Vec<f64>>> {
    match model.config.head {
        TaskHead::Ordinal(k) => {
            let labels = train
                .iter()
                .map(|e| match e.target {
                    Target::Class(c) => Ok(c),
                    ref t => Err(Error::invalid(format!("ordinal head got target {t:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(class_weights(&labels, k)?))
        }
        _ => Ok(None),
    }
}

/// Eval-mode mean loss and metric over `data`.
pub fn evaluate_loss(model: &Model, data: &[Example], class_weights: Option<&[f64]>) -> Result<(f64, Option<f64>)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(data.len());
    for ex in data {
        let out = model.forward(&ex.indices, Mode::Eval, 0)?;
        total += model::loss(&out.prediction, &ex.target, model.config.head, class_weights)?;
        preds.push(model::decode(&out.prediction, model.config.head));
    }
    let gold: Vec<Target> = data.iter().map(|e| e.target.clone()).collect();
    let metric = evaluation::score(model.config.head, &preds, &gold).ok();
    Ok((total / data.len() as f64, metric))
}

/// Mini-batch training with early stopping on dev loss. Returns the
/// parameters of the best dev epoch.
pub fn train(model: &Model, train_set: &[Example], dev_set: &[Example], cfg: &TrainConfig) -> Result<(Model, History)> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::invalid("training needs non-empty train and dev sets"));
    }
    if let Some(i) = train_set.iter().chain(dev_set).position(|e| e.indices.is_empty()) {
        return Err(Error::invalid(format!("example {i} has no tokens (empty input)")));
    }
    let weights = weights_for(model, train_set)?;
    let weights = weights.as_deref();
    let names = trainable_params(model, cfg.mode);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    info!(
        "training {} of {} tensors on {} examples ({} dev), mode {}",
        names.len(),
        model.params().len(),
        train_set.len(),
        dev_set.len(),
        cfg.mode
    );

    let mut current = model.clone();
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, Model, usize)> = None;
    let mut records = Vec::new();
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<(String, Tensor)> = Vec::new();
            for (j, &i) in batch.iter().enumerate() {
                let ex = &train_set[i];
                let seed = example_seed(cfg.seed, epoch, b * cfg.batch_size + j);
                let (loss, grads) = current.loss_and_gradients(&ex.indices, &ex.target, weights, Mode::Train, seed, &refs)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, batch: b + 1, loss });
                }
                epoch_loss += loss;
                if acc.is_empty() {
                    acc = names.iter().cloned().zip(grads).collect();
                } else {
                    for ((_, a), g) in acc.iter_mut().zip(grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (_, g) in acc.iter_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            let norm = clip_grad_norm(&mut acc, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Diverged { epoch, batch: b + 1, loss: norm });
            }
            adam_step(current.params_mut(), &acc, &mut adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let (dev_loss, dev_metric) = evaluate_loss(&current, dev_set, weights)?;
        if !dev_loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0, loss: dev_loss });
        }
        debug!("epoch {epoch}: train {train_loss:.6} dev {dev_loss:.6} metric {dev_metric:?}");
        records.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            dev_metric,
        });
        match &best {
            Some((b, _, _)) if dev_loss >= *b => {
                stale += 1;
                if stale >= cfg.patience {
                    info!("early stop after epoch {epoch}");
                    break;
                }
            }
            _ => {
                best = Some((dev_loss, current.clone(), epoch));
                stale = 0;
            }
        }
    }
    let (_, best_model, best_epoch) = best.expect("at least one epoch");
    let history = History {
        metric: evaluation::metric_name(model.config.head).to_string(),
        epochs: records,
        best_epoch,
    };
    Ok((best_model, history))
}

/// Prepares a model for target-task training. `Rd` reinitializes every
/// tensor; `TlFr`/`TlFt` copy the encoder and draw a fresh head, with
/// `TlFr` freezing the encoder.
pub fn transfer(pretrained: &Model, head: TaskHead, mode: TrainMode, seed: u64) -> Result<Model> {
    let mut out = match mode {
        TrainMode::Rd => {
            let mut cfg = pretrained.config.clone();
            cfg.head = head;
            Model::new(cfg, pretrained.embedding().clone(), seed)?
        }
        TrainMode::TlFr | TrainMode::TlFt => pretrained.with_new_head(head, seed)?,
    };
    out.frozen_encoder = mode == TrainMode::TlFr;
    Ok(out)
}
