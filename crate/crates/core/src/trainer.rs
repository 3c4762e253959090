//! Mini-batch Adam training with cross-entropy loss.

use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::metrics::Metrics;
use crate::model::Model;
use crate::nn::{Mode, ParamKind, Parameters};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::{self, Tensor};

/// Mean cross-entropy of `[N, C]` logits against class labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    ops::cross_entropy(logits, labels).map(|(loss, _)| loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

/// One bias-corrected Adam update of every trainable tensor of `params`.
/// Trainable tensors without an entry in `grads` see a zero gradient.
pub fn adam_step(
    params: &mut dyn Parameters,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut problem = None;
    let mut known = 0usize;
    params.visit("", &mut |name, t, kind| {
        if kind == ParamKind::Trainable {
            if let Some(g) = grads.get(&name) {
                known += 1;
                if g.shape() != t.shape() && problem.is_none() {
                    problem = Some(shape_err!(
                        "gradient for {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        t.shape()
                    ));
                }
            }
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if known != grads.len() {
        return Err(Error::InvalidArgument(
            "gradients supplied for unknown or non-trainable tensors".into(),
        ));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    params.visit_mut("", &mut |name, p, kind| {
        if kind != ParamKind::Trainable {
            return;
        }
        let zeros = || Tensor::from_parts(p.shape().to_vec(), vec![0.0; p.numel()]);
        let m = state.m.entry(name.clone()).or_insert_with(zeros);
        let v = state.v.entry(name.clone()).or_insert_with(zeros);
        let g = grads.get(&name);
        for i in 0..p.numel() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = &mut m.data_mut()[i];
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m.data()[i] / bc1;
            let v_hat = v.data()[i] / bc2;
            p.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    });
    Ok(())
}

/// Plain named tensors, all trainable.
impl Parameters for IndexMap<String, Tensor> {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        for (k, t) in self {
            f(k.clone(), t, ParamKind::Trainable);
        }
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        for (k, t) in self.iter_mut() {
            f(k.clone(), t, ParamKind::Trainable);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop after this many epochs without a lower validation loss.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 48,
            max_epochs: 200,
            adam: AdamConfig::default(),
            seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        // lr = 0 is allowed: it freezes the learnable parameters.
        if !(self.adam.lr >= 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
}

pub fn write_epoch_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss (training
    /// loss when no validation set is given), in inference mode.
    pub best: Model,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: Model,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: Metrics,
    pub predictions: Vec<usize>,
}

const EVAL_BATCH: usize = 64;

/// Inference-mode logits for every sample, `[N, n_classes]`.
pub fn predict_logits(model: &Model, data: &Dataset) -> Result<Tensor> {
    let k = model.config().n_classes;
    let mut out = Vec::with_capacity(data.len() * k);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk)?;
        out.extend_from_slice(model.forward(&x)?.data());
    }
    Tensor::new(&[data.len(), k], out)
}

/// Clip-level loss and metrics in inference mode.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
    }
    let k = model.config().n_classes;
    let labels = data.labels();
    let logits = predict_logits(model, data)?;
    let loss = cross_entropy(&logits, &labels)?;
    let predictions: Vec<usize> = logits.data().chunks(k).map(tensor::argmax).collect();
    Ok(Evaluation {
        loss,
        metrics: Metrics::from_predictions(&predictions, &labels, k)?,
        predictions,
    })
}

/// Runs seeded mini-batch Adam on `train`. The per-epoch hook receives each
/// log row as soon as it is computed.
pub fn train(
    model: &Model,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let k = model.config().n_classes;
    if let Some(bad) = train.labels().into_iter().find(|&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let mut model = model.clone();
    model.set_mode(Mode::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = train.batch(batch)?;
            let (loss, grads, stats) = {
                let mut tape = Tape::new();
                let xv = tape.input(x);
                let pass = model.forward_tape(&mut tape, xv, Mode::Train)?;
                let loss = tape.cross_entropy(pass.logits, &labels)?;
                let grads = tape.backward(loss)?.params();
                (tape.value(loss).data()[0], grads, pass.bn_stats)
            };
            adam_step(&mut model, &grads, &mut adam, &cfg.adam)?;
            model.apply_bn_stats(&stats)?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;

        model.set_mode(Mode::Infer);
        let row = match val.filter(|v| !v.is_empty()) {
            Some(v) => {
                let e = evaluate(&model, v)?;
                EpochLog {
                    epoch,
                    train_loss,
                    val_loss: e.loss,
                    val_acc: e.metrics.accuracy,
                    val_macro_f1: e.metrics.macro_f1,
                }
            }
            None => EpochLog {
                epoch,
                train_loss,
                val_loss: f64::NAN,
                val_acc: f64::NAN,
                val_macro_f1: f64::NAN,
            },
        };
        let score = if row.val_loss.is_nan() { train_loss } else { row.val_loss };
        if best.as_ref().map_or(true, |(s, _, _)| score < *s) {
            best = Some((score, epoch, model.clone()));
        }
        model.set_mode(Mode::Train);
        on_epoch(&row);
        log.push(row);

        if let (Some(p), Some((_, be, _))) = (cfg.patience, &best) {
            if epoch - be >= p {
                break;
            }
        }
    }

    model.set_mode(Mode::Infer);
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
    })
}
