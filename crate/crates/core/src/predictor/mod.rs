//! Exit features and the per-layer MLP exit predictor.
//!
//! For a speculative set of `k` tokens the predictor input is the
//! concatenation `[logits | local probs | prob variation]` (length `3k`).

mod data;
mod io;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::SplitMix64;

pub use data::{collect_training_data, group_by_layer, CollectConfig};
pub use io::{load_predictors, save_predictors};
pub use train::{
    train_on_vectors, train_predictor, train_predictor_bank, MlpF64, PredictorTrainConfig,
    PredictorTrainReport,
};

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_HIDDEN: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub spec_logits: Vec<f32>,
    pub local_probs: Vec<f32>,
    pub prob_variation: Vec<f32>,
}

impl FeatureVector {
    pub fn k(&self) -> usize {
        self.spec_logits.len()
    }

    pub fn dim(&self) -> usize {
        3 * self.k()
    }

    /// Predictor input order: logits, then local probabilities, then variation.
    pub fn to_vec(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&self.spec_logits);
        out.extend_from_slice(&self.local_probs);
        out.extend_from_slice(&self.prob_variation);
        out
    }
}

/// `1/k` in every slot: the reference distribution before any layer has been evaluated.
pub fn uniform_probs(k: usize) -> Vec<f32> {
    vec![1.0 / k as f32; k]
}

pub fn extract_features(spec_logits: &[f32], prev_local_probs: &[f32]) -> Result<FeatureVector> {
    if spec_logits.is_empty() {
        return Err(Error::Empty("speculative logits"));
    }
    if prev_local_probs.len() != spec_logits.len() {
        return Err(Error::DimensionMismatch {
            expected: spec_logits.len(),
            actual: prev_local_probs.len(),
        });
    }
    if !math::all_finite(spec_logits) {
        return Err(Error::NonFinite("speculative logits"));
    }
    let local_probs = math::softmax(spec_logits);
    let prob_variation = local_probs
        .iter()
        .zip(prev_local_probs)
        .map(|(p, q)| p - q)
        .collect();
    Ok(FeatureVector {
        spec_logits: spec_logits.to_vec(),
        local_probs,
        prob_variation,
    })
}

/// Two-layer MLP: `sigmoid(w2 · relu(w1 x + b1) + b2)`.
///
/// `w1` is stored output-major (`hidden x input`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorWeights {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: f32,
    pub threshold: f32,
}

impl PredictorWeights {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    /// Uniform Glorot init for both weight matrices, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut w = Self::zeros(input_dim, hidden_dim);
        let b1 = (6.0 / (input_dim + hidden_dim) as f32).sqrt();
        w.w1.iter_mut().for_each(|x| *x = rng.uniform(b1));
        let b2 = (6.0 / (hidden_dim + 1) as f32).sqrt();
        w.w2.iter_mut().for_each(|x| *x = rng.uniform(b2));
        w
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.input_dim >= 1
            && self.hidden_dim >= 1
            && self.w1.len() == self.input_dim * self.hidden_dim
            && self.b1.len() == self.hidden_dim
            && self.w2.len() == self.hidden_dim;
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "predictor {}x{} with tensors of {}, {}, {}",
                self.input_dim,
                self.hidden_dim,
                self.w1.len(),
                self.b1.len(),
                self.w2.len()
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        let finite = math::all_finite(&self.w1)
            && math::all_finite(&self.b1)
            && math::all_finite(&self.w2)
            && self.b2.is_finite();
        if !finite {
            return Err(Error::NonFinite("predictor weights"));
        }
        Ok(())
    }

    /// Exit probability, strictly inside `(0, 1)`.
    pub fn forward(&self, input: &[f32]) -> Result<f32> {
        if input.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: input.len(),
            });
        }
        let mut hidden = vec![0.0; self.hidden_dim];
        math::matvec(&self.w1, input, &mut hidden);
        for (h, b) in hidden.iter_mut().zip(&self.b1) {
            *h = (*h + b).max(0.0);
        }
        Ok(sigmoid(math::dot(&self.w2, &hidden) + self.b2))
    }

    pub fn forward_features(&self, features: &FeatureVector) -> Result<f32> {
        self.forward(&features.to_vec())
    }
}

/// Logistic function clamped so the result never rounds to 0 or 1 in f32.
pub fn sigmoid(z: f32) -> f32 {
    let p = 1.0 / (1.0 + (-(z as f64)).exp());
    (p as f32).clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
}

pub fn decide_exit(prob: f32, threshold: f32) -> bool {
    prob > threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub features: FeatureVector,
    /// The layer's argmax equals the final layer's argmax.
    pub label: bool,
    pub layer: usize,
}

/// One predictor per layer, all sharing `k` and the hidden width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorBank {
    pub k: usize,
    pub hidden_dim: usize,
    pub predictors: BTreeMap<usize, PredictorWeights>,
}

impl PredictorBank {
    pub fn new(k: usize, hidden_dim: usize) -> Self {
        Self {
            k,
            hidden_dim,
            predictors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, layer: usize, weights: PredictorWeights) -> Result<()> {
        if weights.input_dim != 3 * self.k || weights.hidden_dim != self.hidden_dim {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer} predictor is {}x{}, bank expects {}x{}",
                weights.input_dim,
                weights.hidden_dim,
                3 * self.k,
                self.hidden_dim
            )));
        }
        self.predictors.insert(layer, weights);
        Ok(())
    }

    pub fn get(&self, layer: usize) -> Result<&PredictorWeights> {
        self.predictors
            .get(&layer)
            .ok_or(Error::MissingPredictor(layer))
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.predictors.keys().copied()
    }
}

/// Predictor storage footprint.
///
/// `params_per_layer` counts the two weight matrices only (`3k*H + H`); the
/// stored predictors also carry `H + 1` bias values per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorFootprint {
    pub params_per_layer: usize,
    pub total_params: usize,
    pub total_params_with_bias: usize,
}

impl PredictorFootprint {
    /// Size of the bias-free parameters in KiB at `bytes_per_param`.
    pub fn kib(&self, bytes_per_param: usize) -> f64 {
        (self.total_params * bytes_per_param) as f64 / 1024.0
    }

    /// KiB at 16-bit storage, the precision the weights are served in.
    pub fn half_precision_kib(&self) -> f64 {
        self.kib(2)
    }

    /// KiB as the predictors are stored here, in f32.
    pub fn f32_kib(&self) -> f64 {
        self.kib(4)
    }
}

pub fn predictor_param_count(k: usize, hidden_dim: usize, num_layers: usize) -> PredictorFootprint {
    let params_per_layer = 3 * k * hidden_dim + hidden_dim;
    PredictorFootprint {
        params_per_layer,
        total_params: params_per_layer * num_layers,
        total_params_with_bias: (params_per_layer + hidden_dim + 1) * num_layers,
    }
}
