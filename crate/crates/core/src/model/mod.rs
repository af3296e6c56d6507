//! Toy decoder-only transformer used for both the target and the draft model.
//!
//! Pre-norm blocks (LayerNorm → multi-head causal attention → residual,
//! LayerNorm → ReLU FFN → residual), fixed sinusoidal positions, and a final
//! LayerNorm applied before every LM-head projection. All linear weights are
//! stored output-major (`out_dim x in_dim`), so each output unit is one
//! contiguous row.

mod forward;
pub(crate) mod io;
mod train;

pub(crate) use forward::TreeBatch;
pub use forward::{KvCache, KvMode, LayerState};
pub use io::{load_weights, save_weights};
pub use train::sequence_loss;
pub use train::{train_language_model, LmTrainConfig, LmTrainReport, Optimizer};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::SplitMix64;

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::target()
    }
}

impl ModelConfig {
    pub fn target() -> Self {
        Self {
            vocab_size: 256,
            hidden_dim: 64,
            num_layers: 8,
            num_heads: 4,
            ffn_dim: 256,
            max_context: 512,
            seed: 1,
        }
    }

    pub fn draft() -> Self {
        Self {
            num_layers: 2,
            seed: 2,
            ..Self::target()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return fail("hidden_dim, num_heads and ffn_dim must be non-zero");
        }
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1");
        }
        if self.max_context == 0 {
            return fail("max_context must be non-zero");
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail("hidden_dim must be divisible by num_heads");
        }
        if self.vocab_size > u32::MAX as usize {
            return fail("vocab_size must fit in a u32 token id");
        }
        Ok(())
    }

    /// Parameter count from the architecture definition.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.hidden_dim, self.ffn_dim);
        let per_layer = 2 * (2 * d) + 4 * d * d + 2 * d * f;
        v * d + self.num_layers * per_layer + 2 * d + d * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Uniform { fan_in: usize, fan_out: usize },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

impl TensorSpec {
    fn new(name: impl Into<String>, dims: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            init,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Declaration order of every weight tensor. Initialisation, persistence
/// and the optimiser all walk tensors in this order.
pub(crate) fn tensor_specs(config: &ModelConfig) -> Vec<TensorSpec> {
    let (v, d, f) = (config.vocab_size, config.hidden_dim, config.ffn_dim);
    let uniform = |fan_in, fan_out| Init::Uniform { fan_in, fan_out };
    let mut specs = vec![TensorSpec::new("embedding", &[v, d], uniform(v, d))];
    for l in 0..config.num_layers {
        let p = format!("layers.{l}");
        specs.push(TensorSpec::new(
            format!("{p}.attn_norm.gain"),
            &[d],
            Init::Ones,
        ));
        specs.push(TensorSpec::new(
            format!("{p}.attn_norm.bias"),
            &[d],
            Init::Zeros,
        ));
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push(TensorSpec::new(
                format!("{p}.attn.{w}"),
                &[d, d],
                uniform(d, d),
            ));
        }
        specs.push(TensorSpec::new(
            format!("{p}.ffn_norm.gain"),
            &[d],
            Init::Ones,
        ));
        specs.push(TensorSpec::new(
            format!("{p}.ffn_norm.bias"),
            &[d],
            Init::Zeros,
        ));
        specs.push(TensorSpec::new(
            format!("{p}.ffn.up"),
            &[f, d],
            uniform(d, f),
        ));
        specs.push(TensorSpec::new(
            format!("{p}.ffn.down"),
            &[d, f],
            uniform(f, d),
        ));
    }
    specs.push(TensorSpec::new("final_norm.gain", &[d], Init::Ones));
    specs.push(TensorSpec::new("final_norm.bias", &[d], Init::Zeros));
    specs.push(TensorSpec::new("lm_head", &[v, d], uniform(d, v)));
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Norm {
    pub fn apply(&self, x: &[f32], out: &mut [f32]) -> math::NormStats {
        math::layer_norm(x, &self.gain, &self.bias, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn_norm: Norm,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ffn_norm: Norm,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    pub(crate) embedding: Vec<f32>,
    pub(crate) layers: Vec<Layer>,
    pub(crate) final_norm: Norm,
    pub(crate) lm_head: Vec<f32>,
    positions: Vec<f32>,
}

impl PartialEq for TransformerModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embedding == other.embedding
            && self.layers == other.layers
            && self.final_norm == other.final_norm
            && self.lm_head == other.lm_head
    }
}

fn sinusoidal_table(max_context: usize, dim: usize) -> Vec<f32> {
    let mut table = vec![0.0f32; max_context * dim];
    for pos in 0..max_context {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf((2 * i) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            table[pos * dim + 2 * i] = angle.sin() as f32;
            table[pos * dim + 2 * i + 1] = angle.cos() as f32;
        }
    }
    table
}

impl TransformerModel {
    /// Seeded initialisation: one splitmix64 stream walks the tensors in
    /// declaration order; matrices draw `uniform(-b, b)` with
    /// `b = sqrt(6 / (fan_in + fan_out))`, norm gains start at one and biases at zero.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed);
        let tensors = tensor_specs(&config)
            .iter()
            .map(|spec| match spec.init {
                Init::Uniform { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                    (0..spec.len()).map(|_| rng.uniform(bound)).collect()
                }
                Init::Ones => vec![1.0; spec.len()],
                Init::Zeros => vec![0.0; spec.len()],
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Assembles a model from tensors in declaration order.
    pub(crate) fn from_tensors(config: ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(&config);
        if tensors.len() != specs.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if t.len() != spec.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} has {} values, expected {}",
                    spec.name,
                    t.len(),
                    spec.len()
                )));
            }
            if !math::all_finite(t) {
                return Err(Error::NonFinite("model weights"));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let embedding = next();
        let layers = (0..config.num_layers)
            .map(|_| Layer {
                attn_norm: Norm {
                    gain: next(),
                    bias: next(),
                },
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: Norm {
                    gain: next(),
                    bias: next(),
                },
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = Norm {
            gain: next(),
            bias: next(),
        };
        let lm_head = next();
        let positions = sinusoidal_table(config.max_context, config.hidden_dim);
        Ok(Self {
            config,
            embedding,
            layers,
            final_norm,
            lm_head,
            positions,
        })
    }

    pub(crate) fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.embedding];
        for l in &self.layers {
            out.extend([
                &l.attn_norm.gain[..],
                &l.attn_norm.bias,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm.gain,
                &l.ffn_norm.bias,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.extend([
            &self.final_norm.gain[..],
            &self.final_norm.bias,
            &self.lm_head,
        ]);
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm.gain,
                &mut l.attn_norm.bias,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm.gain,
                &mut l.ffn_norm.bias,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.extend([
            &mut self.final_norm.gain,
            &mut self.final_norm.bias,
            &mut self.lm_head,
        ]);
        out
    }

    /// A same-shaped model with every tensor zeroed; used as a gradient buffer.
    pub(crate) fn zeros_like(&self) -> Self {
        let tensors = self.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self::from_tensors(self.config.clone(), tensors).expect("shapes copied from a valid model")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn position(&self, pos: usize) -> &[f32] {
        let d = self.config.hidden_dim;
        &self.positions[pos * d..(pos + 1) * d]
    }

    /// Token embeddings are scaled by `sqrt(hidden_dim)` before the positional term is added.
    pub(crate) fn embed_scale(&self) -> f32 {
        (self.config.hidden_dim as f32).sqrt()
    }

    /// Input vector for `token` at position `pos`.
    pub(crate) fn embed_token(&self, token: TokenId, pos: usize) -> impl Iterator<Item = f32> + '_ {
        let d = self.config.hidden_dim;
        let scale = self.embed_scale();
        let row = &self.embedding[token as usize * d..(token as usize + 1) * d];
        row.iter()
            .zip(self.position(pos))
            .map(move |(e, p)| e * scale + p)
    }

    pub(crate) fn check_token(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.config.vocab_size {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            })
        }
    }

    fn head_row(&self, token: usize) -> &[f32] {
        let d = self.config.hidden_dim;
        &self.lm_head[token * d..(token + 1) * d]
    }

    /// Applies the final norm; every head projection goes through this.
    pub fn normalize_for_head(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        if hidden.len() != self.config.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.hidden_dim,
                actual: hidden.len(),
            });
        }
        if !math::all_finite(hidden) {
            return Err(Error::NonFinite("hidden state"));
        }
        let mut normed = vec![0.0; hidden.len()];
        self.final_norm.apply(hidden, &mut normed);
        Ok(normed)
    }

    /// Logits over the whole vocabulary: `final_norm(hidden) · lm_head`.
    pub fn full_head_logits(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        let normed = self.normalize_for_head(hidden)?;
        let mut logits = vec![0.0; self.config.vocab_size];
        math::matvec(&self.lm_head, &normed, &mut logits);
        Ok(logits)
    }

    /// Logits restricted to `token_ids`, in the given order (the sliced LM head).
    pub fn sliced_head_logits(&self, hidden: &[f32], token_ids: &[TokenId]) -> Result<Vec<f32>> {
        if token_ids.is_empty() {
            return Err(Error::Empty("speculative token ids"));
        }
        for &t in token_ids {
            self.check_token(t)?;
        }
        let normed = self.normalize_for_head(hidden)?;
        Ok(self.sliced_from_normed(&normed, token_ids))
    }

    /// Sliced projection of an already-normalised hidden state; ids must be validated.
    pub(crate) fn sliced_from_normed(&self, normed: &[f32], token_ids: &[TokenId]) -> Vec<f32> {
        token_ids
            .iter()
            .map(|&t| math::dot(self.head_row(t as usize), normed))
            .collect()
    }

    /// SHA-256 of the serialised weight file, truncated to 64 bits.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_bytes(&io::to_bytes(self))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        io::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        io::from_bytes(bytes)
    }
}

pub fn fingerprint_bytes(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 12,
            max_context: 32,
            seed: 5,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = TransformerModel::init(ModelConfig { seed: 1, ..small() }).unwrap();
        let b = TransformerModel::init(ModelConfig { seed: 1, ..small() }).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn seed_changes_weights() {
        let a = TransformerModel::init(ModelConfig { seed: 1, ..small() }).unwrap();
        let b = TransformerModel::init(ModelConfig { seed: 2, ..small() }).unwrap();
        assert!(a.embedding.iter().zip(&b.embedding).any(|(x, y)| x != y));
    }

    #[test]
    fn default_parameter_count_matches_enumeration() {
        // 256*64 embedding + 8 * (4*64 norms + 4*64*64 attention + 2*64*256 ffn)
        // + 2*64 final norm + 64*256 head.
        let closed_form = 256 * 64 + 8 * (4 * 64 + 4 * 64 * 64 + 2 * 64 * 256) + 2 * 64 + 64 * 256;
        assert_eq!(closed_form, 428_160);
        let config = ModelConfig::target();
        let model = TransformerModel::init(config.clone()).unwrap();
        let enumerated: usize = tensor_specs(&config).iter().map(TensorSpec::len).sum();
        assert_eq!(model.parameter_count(), closed_form);
        assert_eq!(enumerated, closed_form);
        assert_eq!(config.parameter_count(), closed_form);
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad = [
            ModelConfig {
                hidden_dim: 10,
                num_heads: 4,
                ..small()
            },
            ModelConfig {
                num_layers: 0,
                ..small()
            },
            ModelConfig {
                vocab_size: 1,
                ..small()
            },
            ModelConfig {
                hidden_dim: 0,
                ..small()
            },
        ];
        for config in bad {
            assert!(matches!(
                TransformerModel::init(config),
                Err(Error::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn zero_hidden_with_zero_bias_gives_zero_logits() {
        let model = TransformerModel::init(small()).unwrap();
        let logits = model.full_head_logits(&[0.0; 8]).unwrap();
        // Normalised zero vector is zero when the norm bias is zero.
        let normed = model.normalize_for_head(&[0.0; 8]).unwrap();
        assert!(normed.iter().all(|v| *v == 0.0));
        assert!(logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn head_rejects_bad_inputs() {
        let model = TransformerModel::init(small()).unwrap();
        let mut h = vec![0.1; 8];
        h[3] = f32::NAN;
        assert!(matches!(
            model.full_head_logits(&h),
            Err(Error::NonFinite(_))
        ));
        let h = vec![0.1; 8];
        assert!(matches!(
            model.sliced_head_logits(&h, &[]),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            model.sliced_head_logits(&h, &[16]),
            Err(Error::TokenOutOfRange { token: 16, .. })
        ));
    }
}
