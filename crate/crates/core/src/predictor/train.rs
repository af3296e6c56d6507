//! Per-layer predictor training: class-weighted binary cross-entropy,
//! minibatch SGD, fixed shuffle order.
//!
//! Training runs in f64 on standardised inputs. The standardisation is
//! folded into the first layer when the f32 weights are exported, so the
//! exported predictor consumes raw features.

use serde::{Deserialize, Serialize};

use super::{
    decide_exit, PredictorBank, PredictorWeights, TrainingExample, DEFAULT_HIDDEN,
    DEFAULT_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorTrainConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight each class so both contribute equally to the loss.
    pub class_balance: bool,
    pub threshold: f32,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: DEFAULT_HIDDEN,
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.05,
            class_balance: true,
            threshold: DEFAULT_THRESHOLD,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainReport {
    /// Weighted training-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Accuracy of the exported f32 predictor on the training set.
    pub train_accuracy: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// The predictor MLP in f64, used for training and gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpF64 {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpF64 {
    pub fn from_weights(w: &PredictorWeights) -> Self {
        let up = |v: &[f32]| v.iter().map(|x| *x as f64).collect::<Vec<_>>();
        Self {
            input_dim: w.input_dim,
            hidden_dim: w.hidden_dim,
            w1: up(&w.w1),
            b1: up(&w.b1),
            w2: up(&w.w2),
            b2: w.b2 as f64,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: 0.0,
        }
    }

    /// Parameters in the order w1, b1, w2, b2.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.w1.len() + 2 * self.hidden_dim + 1);
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let (w1, rest) = flat.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.hidden_dim);
        let (w2, rest) = rest.split_at(self.hidden_dim);
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = rest[0];
    }

    fn hidden(&self, x: &[f64], out: &mut [f64]) {
        for (j, h) in out.iter_mut().enumerate() {
            let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
            *h = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b1[j];
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut pre = vec![0.0; self.hidden_dim];
        self.hidden(x, &mut pre);
        pre.iter()
            .zip(&self.w2)
            .map(|(p, w)| p.max(0.0) * w)
            .sum::<f64>()
            + self.b2
    }

    /// Weighted mean binary cross-entropy over `xs`.
    pub fn loss(&self, xs: &[Vec<f64>], labels: &[bool], weights: &[f64]) -> f64 {
        let total: f64 = weights.iter().sum();
        xs.iter()
            .zip(labels)
            .zip(weights)
            .map(|((x, &y), w)| w * bce_with_logit(self.logit(x), y))
            .sum::<f64>()
            / total
    }

    /// Gradient of [`MlpF64::loss`] with respect to every parameter.
    pub fn gradient(&self, xs: &[Vec<f64>], labels: &[bool], weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let mut grad = self.zeros_like();
        let mut pre = vec![0.0; self.hidden_dim];
        for ((x, &y), w) in xs.iter().zip(labels).zip(weights) {
            self.hidden(x, &mut pre);
            let z = pre
                .iter()
                .zip(&self.w2)
                .map(|(p, w)| p.max(0.0) * w)
                .sum::<f64>()
                + self.b2;
            let dz = (logistic(z) - if y { 1.0 } else { 0.0 }) * w / total;
            grad.b2 += dz;
            for j in 0..self.hidden_dim {
                if pre[j] <= 0.0 {
                    continue;
                }
                grad.w2[j] += dz * pre[j];
                let dh = dz * self.w2[j];
                grad.b1[j] += dh;
                let row = &mut grad.w1[j * self.input_dim..(j + 1) * self.input_dim];
                for (g, v) in row.iter_mut().zip(x) {
                    *g += dh * v;
                }
            }
        }
        grad
    }

    fn step(&mut self, grad: &Self, lr: f64) {
        let upd = |p: &mut [f64], g: &[f64]| p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
        upd(&mut self.w1, &grad.w1);
        upd(&mut self.b1, &grad.b1);
        upd(&mut self.w2, &grad.w2);
        self.b2 -= lr * grad.b2;
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn bce_with_logit(z: f64, label: bool) -> f64 {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    softplus - if label { z } else { 0.0 }
}

/// Per-dimension mean and standard deviation (1 for constant dimensions).
fn standardizer(xs: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = xs.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in xs {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; dim];
    for x in xs {
        std.iter_mut()
            .zip(x)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    for s in &mut std {
        *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
    }
    (mean, std)
}

pub fn train_predictor(
    examples: &[TrainingExample],
    config: &PredictorTrainConfig,
) -> Result<(PredictorWeights, PredictorTrainReport)> {
    let inputs: Vec<Vec<f32>> = examples.iter().map(|e| e.features.to_vec()).collect();
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    train_on_vectors(&inputs, &labels, config)
}

/// Trains on raw input vectors; [`train_predictor`] is the feature-typed entry point.
pub fn train_on_vectors(
    inputs: &[Vec<f32>],
    labels: &[bool],
    config: &PredictorTrainConfig,
) -> Result<(PredictorWeights, PredictorTrainReport)> {
    if inputs.is_empty() {
        return Err(Error::Empty("predictor training examples"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} inputs, {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if config.hidden_dim == 0 || config.batch_size == 0 {
        return Err(Error::InvalidConfig(
            "hidden_dim and batch_size must be non-zero".into(),
        ));
    }
    if !(config.threshold > 0.0 && config.threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "threshold {} outside (0, 1)",
            config.threshold
        )));
    }
    let dim = inputs[0].len();
    if let Some(bad) = inputs.iter().find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }

    let raw: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| x.iter().map(|v| *v as f64).collect())
        .collect();
    let (mean, std) = standardizer(&raw, dim);
    let xs: Vec<Vec<f64>> = raw
        .iter()
        .map(|x| {
            x.iter()
                .zip(&mean)
                .zip(&std)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect();

    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    let n = labels.len() as f64;
    let weights: Vec<f64> = labels
        .iter()
        .map(|&l| match (config.class_balance, positives, negatives) {
            (true, p, q) if p > 0 && q > 0 => n / (2.0 * if l { p } else { q } as f64),
            _ => 1.0,
        })
        .collect();

    let init = PredictorWeights::init(
        dim,
        config.hidden_dim,
        SplitMix64::fork(config.seed, 0).next_u64(),
    );
    let mut mlp = MlpF64::from_weights(&init);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        SplitMix64::fork(config.seed, epoch as u64 + 1).shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<bool> = batch.iter().map(|&i| labels[i]).collect();
            let bw: Vec<f64> = batch.iter().map(|&i| weights[i]).collect();
            let grad = mlp.gradient(&bx, &by, &bw);
            mlp.step(&grad, config.learning_rate);
        }
        epoch_losses.push(mlp.loss(&xs, labels, &weights));
    }

    let exported = export(&mlp, &mean, &std, config.threshold);
    exported.validate()?;
    let mut correct = 0usize;
    for (x, &y) in inputs.iter().zip(labels) {
        if decide_exit(exported.forward(x)?, exported.threshold) == y {
            correct += 1;
        }
    }
    let report = PredictorTrainReport {
        epoch_losses,
        train_accuracy: correct as f64 / n,
        positives,
        negatives,
    };
    Ok((exported, report))
}

/// Trains one predictor per layer. Each layer gets its own seed stream, so
/// the result does not depend on execution mode or layer order.
pub fn train_predictor_bank(
    k: usize,
    by_layer: &[(usize, Vec<TrainingExample>)],
    config: &PredictorTrainConfig,
    execution: Execution,
) -> Result<(PredictorBank, Vec<(usize, PredictorTrainReport)>)> {
    let trained = execution.map(by_layer, |(layer, examples)| {
        let cfg = PredictorTrainConfig {
            seed: SplitMix64::fork(config.seed, *layer as u64).next_u64(),
            ..config.clone()
        };
        train_predictor(examples, &cfg)
    });
    let mut bank = PredictorBank::new(k, config.hidden_dim);
    let mut reports = Vec::with_capacity(by_layer.len());
    for ((layer, _), result) in by_layer.iter().zip(trained) {
        let (weights, report) = result?;
        bank.insert(*layer, weights)?;
        reports.push((*layer, report));
    }
    Ok((bank, reports))
}

/// Folds `(x - mean) / std` into the first layer and narrows to f32.
fn export(mlp: &MlpF64, mean: &[f64], std: &[f64], threshold: f32) -> PredictorWeights {
    let dim = mlp.input_dim;
    let mut w1 = Vec::with_capacity(mlp.w1.len());
    let mut b1 = Vec::with_capacity(mlp.hidden_dim);
    for j in 0..mlp.hidden_dim {
        let row = &mlp.w1[j * dim..(j + 1) * dim];
        let mut bias = mlp.b1[j];
        for k in 0..dim {
            w1.push((row[k] / std[k]) as f32);
            bias -= row[k] * mean[k] / std[k];
        }
        b1.push(bias as f32);
    }
    PredictorWeights {
        input_dim: dim,
        hidden_dim: mlp.hidden_dim,
        w1,
        b1,
        w2: mlp.w2.iter().map(|w| *w as f32).collect(),
        b2: mlp.b2 as f32,
        threshold,
    }
}
