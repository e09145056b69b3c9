use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, Targets};
use super::metrics::{accuracy, mean_average_precision};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::{to_tensor, FloatImage};
use crate::nn::{Adam, Linear, Module, Param};
use crate::rng::derived;

const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Linear,
    Finetune,
}

impl ProbeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeMode::Linear => "linear",
            ProbeMode::Finetune => "finetune",
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            ProbeMode::Linear => 1e-3,
            ProbeMode::Finetune => 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam learning rate; the mode's default when unset.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Standardize features with statistics of the initial training features.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: None,
            weight_decay: 0.0,
            milestones: vec![0.6, 0.8],
            lr_decay: 0.1,
            standardize: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("probe batch_size must be positive".into()));
        }
        if self.lr.is_some_and(|lr| !(lr > 0.0)) || self.weight_decay < 0.0 || !(self.lr_decay > 0.0) {
            return Err(Error::Config("probe learning-rate parameters must be positive".into()));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) || self.milestones.iter().any(|&m| !(0.0 < m && m < 1.0)) {
            return Err(Error::Config("probe milestones must be increasing fractions in (0, 1)".into()));
        }
        Ok(())
    }

    fn lr_for_epoch(&self, base: f64, epoch: usize) -> f64 {
        let reached = self
            .milestones
            .iter()
            .filter(|&&m| epoch as f64 >= m * self.epochs as f64 - 1e-9)
            .count();
        base * self.lr_decay.powi(reached as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// `mAP` for multi-label targets, `accuracy` for single-label targets.
    pub metric_name: String,
    /// Best validation value, ties resolved to the earliest epoch.
    pub best: f64,
    /// Epoch of the best value; 0 is the untrained classifier.
    pub epoch_of_best: usize,
    /// Validation value after every epoch, starting with epoch 0.
    pub history: Vec<f64>,
}

pub fn metric_name(targets: &Targets) -> &'static str {
    match targets {
        Targets::MultiLabel(_) => "mAP",
        Targets::SingleLabel(_) => "accuracy",
    }
}

/// Pooled encoder features of `images`, computed in fixed-size chunks.
pub fn embed_all(encoder: &Encoder, images: &[FloatImage]) -> Array2<f64> {
    let mut out = Array2::zeros((images.len(), encoder.feature_dim()));
    for (i, chunk) in images.chunks(EMBED_CHUNK).enumerate() {
        let refs: Vec<&FloatImage> = chunk.iter().collect();
        let v = encoder.embed(&to_tensor(&refs));
        out.slice_mut(s![i * EMBED_CHUNK..i * EMBED_CHUNK + chunk.len(), ..]).assign(&v);
    }
    out
}

/// Fixed per-dimension affine map applied before the classifier.
#[derive(Debug, Clone)]
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Array2<f64>, enabled: bool) -> Self {
        let d = x.ncols();
        if !enabled || x.nrows() == 0 {
            return Self {
                mean: vec![0.0; d],
                inv_std: vec![1.0; d],
            };
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let inv_std = x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(col, m)| {
                let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.nrows() as f64;
                1.0 / (var.sqrt() + 1e-6)
            })
            .collect();
        Self { mean, inv_std }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        y
    }

    fn backward(&self, grad: &Array2<f64>) -> Array2<f64> {
        let mut g = grad.clone();
        for mut row in g.rows_mut() {
            for (v, s) in row.iter_mut().zip(&self.inv_std) {
                *v *= s;
            }
        }
        g
    }
}

fn target_matrix(ds: &LabeledDataset) -> Array2<f64> {
    let mut y = Array2::zeros((ds.len(), ds.num_classes));
    for (i, (_, row)) in ds.iter().enumerate() {
        for (c, v) in row.into_iter().enumerate() {
            y[[i, c]] = v as f64;
        }
    }
    y
}

/// Loss gradient w.r.t. the logits: sigmoid cross-entropy averaged over all
/// entries for multi-label targets, softmax cross-entropy averaged over rows
/// for single-label targets.
fn logit_grad(logits: &Array2<f64>, y: &Array2<f64>, multi: bool) -> Array2<f64> {
    let (n, c) = logits.dim();
    if multi {
        let scale = 1.0 / (n * c) as f64;
        Array2::from_shape_fn((n, c), |(i, j)| (sigmoid(logits[[i, j]]) - y[[i, j]]) * scale)
    } else {
        let mut g = Array2::zeros((n, c));
        for i in 0..n {
            let row = logits.row(i);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..c {
                g[[i, j]] = ((row[j] - m).exp() / z - y[[i, j]]) / n as f64;
            }
        }
        g
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn evaluate(logits: &Array2<f64>, val: &LabeledDataset) -> Result<f64> {
    match &val.targets {
        Targets::MultiLabel(labels) => {
            let scores: Vec<Vec<f64>> = logits.rows().into_iter().map(|r| r.to_vec()).collect();
            mean_average_precision(&scores, labels)
        }
        Targets::SingleLabel(truth) => {
            let pred: Vec<usize> = logits
                .rows()
                .into_iter()
                .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b }).0)
                .collect();
            Ok(accuracy(&pred, truth))
        }
    }
}

fn check_inputs(train: &LabeledDataset, val: &LabeledDataset) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput("probe needs non-empty train and val splits".into()));
    }
    if train.num_classes != val.num_classes || train.targets.kind() != val.targets.kind() {
        return Err(Error::InvalidInput("train and val splits disagree on the target schema".into()));
    }
    Ok(())
}

struct Tracker {
    history: Vec<f64>,
    best: f64,
    epoch_of_best: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            history: Vec::new(),
            best: f64::NEG_INFINITY,
            epoch_of_best: 0,
        }
    }

    fn record(&mut self, value: f64) {
        if value > self.best {
            self.best = value;
            self.epoch_of_best = self.history.len();
        }
        self.history.push(value);
    }

    fn finish(self, name: &str) -> ProbeResult {
        ProbeResult {
            metric_name: name.to_string(),
            best: self.best,
            epoch_of_best: self.epoch_of_best,
            history: self.history,
        }
    }
}

/// Trains a single affine layer on frozen encoder features and returns the
/// best validation metric over epochs.
pub fn linear_probe(encoder: &Encoder, train: &LabeledDataset, val: &LabeledDataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    check_inputs(train, val)?;
    let multi = matches!(train.targets, Targets::MultiLabel(_));
    let raw = embed_all(encoder, &train.images);
    let std = Standardizer::fit(&raw, cfg.standardize);
    let x = std.apply(&raw);
    let xv = std.apply(&embed_all(encoder, &val.images));
    let y = target_matrix(train);
    let mut classifier = Linear::new("classifier", x.ncols(), train.num_classes, &mut derived(cfg.seed, &[0xc1a5]));
    let base_lr = cfg.lr.unwrap_or(ProbeMode::Linear.default_lr());
    let mut opt = Adam::new(base_lr, cfg.weight_decay);
    let mut tracker = Tracker::new();
    tracker.record(evaluate(&classifier.forward_inference(&xv), val)?);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_for_epoch(base_lr, epoch);
        order.shuffle(&mut derived(cfg.seed, &[0x5f1e, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb = y.select(Axis(0), batch);
            let (logits, cache) = classifier.forward(&xb);
            classifier.zero_grad();
            classifier.backward(&cache, &logit_grad(&logits, &yb, multi));
            opt.step(classifier.params_mut());
        }
        tracker.record(evaluate(&classifier.forward_inference(&xv), val)?);
    }
    Ok(tracker.finish(metric_name(&train.targets)))
}

/// Trains encoder and classifier jointly; returns the best validation metric
/// and the fine-tuned encoder.
pub fn fine_tune(encoder: &Encoder, train: &LabeledDataset, val: &LabeledDataset, cfg: &ProbeConfig) -> Result<(ProbeResult, Encoder)> {
    cfg.validate()?;
    check_inputs(train, val)?;
    let multi = matches!(train.targets, Targets::MultiLabel(_));
    let mut encoder = encoder.clone();
    let std = Standardizer::fit(&embed_all(&encoder, &train.images), cfg.standardize);
    let y = target_matrix(train);
    let mut classifier = Linear::new("classifier", encoder.feature_dim(), train.num_classes, &mut derived(cfg.seed, &[0xc1a5]));
    let base_lr = cfg.lr.unwrap_or(ProbeMode::Finetune.default_lr());
    let mut opt = Adam::new(base_lr, cfg.weight_decay);
    let val_logits = |enc: &Encoder, cls: &Linear| cls.forward_inference(&std.apply(&embed_all(enc, &val.images)));
    let mut tracker = Tracker::new();
    tracker.record(evaluate(&val_logits(&encoder, &classifier), val)?);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_for_epoch(base_lr, epoch);
        order.shuffle(&mut derived(cfg.seed, &[0x5f1e, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let imgs: Vec<&FloatImage> = batch.iter().map(|&i| &train.images[i]).collect();
            let (v, trace) = encoder.forward_train(&to_tensor(&imgs));
            let xb = std.apply(&v);
            let (logits, cache) = classifier.forward(&xb);
            encoder.zero_grad();
            classifier.zero_grad();
            let gx = classifier.backward(&cache, &logit_grad(&logits, &y.select(Axis(0), batch), multi));
            encoder.backward(&trace, &std.backward(&gx));
            let mut params: Vec<&mut Param> = encoder.params_mut();
            params.extend(classifier.params_mut());
            opt.step(params);
        }
        tracker.record(evaluate(&val_logits(&encoder, &classifier), val)?);
    }
    Ok((tracker.finish(metric_name(&train.targets)), encoder))
}
