//! Next-token training for the toy models: manual backprop with SGD or Adam.
//!
//! Each window's gradient is computed independently (optionally in
//! parallel) and the batch gradient is summed in window order, so results
//! do not depend on the execution mode.

use serde::{Deserialize, Serialize};

use super::{TokenId, TransformerModel};
use crate::error::{Error, Result};
use crate::math::{self, NormStats};
use crate::par::Execution;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    /// Plain SGD with a fixed learning rate.
    Sgd,
    /// Adam with bias correction; deterministic like SGD, far fewer steps.
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f32,
    pub seed: u64,
    /// Use only the first `max_bytes` of the corpus (0 = all).
    pub max_bytes: usize,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            seq_len: 128,
            batch_size: 1,
            learning_rate: 2e-3,
            optimizer: Optimizer::adam(),
            grad_clip: 1.0,
            seed: 17,
            max_bytes: 0,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    /// Mean per-token cross-entropy (nats) over each epoch.
    pub epoch_losses: Vec<f32>,
    pub steps: usize,
    pub tokens_per_epoch: usize,
}

/// Trains `model` in place on next-byte prediction over `corpus`.
pub fn train_language_model(
    model: &mut TransformerModel,
    corpus: &[u8],
    config: &LmTrainConfig,
) -> Result<LmTrainReport> {
    let corpus = match config.max_bytes {
        0 => corpus,
        n => &corpus[..n.min(corpus.len())],
    };
    if corpus.len() < 2 {
        return Err(Error::Empty("training corpus"));
    }
    if config.seq_len == 0 || config.batch_size == 0 {
        return Err(Error::InvalidConfig(
            "seq_len and batch_size must be non-zero".into(),
        ));
    }
    let tokens: Vec<TokenId> = corpus.iter().map(|b| *b as TokenId).collect();
    for &t in &tokens {
        model.check_token(t)?;
    }
    let seq_len = config
        .seq_len
        .min(tokens.len() - 1)
        .min(model.config().max_context);
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * seq_len)
        .take_while(|s| s + seq_len < tokens.len())
        .collect();
    if starts.is_empty() {
        starts.push(0);
    }
    let tokens_per_epoch = starts.len() * seq_len;

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    let mut opt = OptState::new(model, config.optimizer);
    for epoch in 0..config.epochs {
        let mut order = starts.clone();
        SplitMix64::fork(config.seed, epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let results = config.execution.map(batch, |&s| {
                let window = &tokens[s..s + seq_len + 1];
                window_gradient(model, &window[..seq_len], &window[1..])
            });
            let mut grad = model.zeros_like();
            let mut batch_loss = 0.0f64;
            for (loss, g) in &results {
                batch_loss += *loss as f64;
                for (acc, part) in grad.tensors_mut().into_iter().zip(g.tensors()) {
                    for (a, p) in acc.iter_mut().zip(part) {
                        *a += p;
                    }
                }
            }
            drop(results);
            epoch_loss += batch_loss;
            let scale = 1.0 / (batch.len() * seq_len) as f32;
            opt.step(model, &grad, scale, config.learning_rate, config.grad_clip);
            steps += 1;
        }
        epoch_losses.push((epoch_loss / tokens_per_epoch as f64) as f32);
    }
    Ok(LmTrainReport {
        epoch_losses,
        steps,
        tokens_per_epoch,
    })
}

struct OptState {
    kind: Optimizer,
    moments: Option<(TransformerModel, TransformerModel)>,
    t: i32,
}

impl OptState {
    fn new(model: &TransformerModel, kind: Optimizer) -> Self {
        let moments = match kind {
            Optimizer::Sgd => None,
            Optimizer::Adam { .. } => Some((model.zeros_like(), model.zeros_like())),
        };
        Self {
            kind,
            moments,
            t: 0,
        }
    }

    /// `grad` holds summed gradients; `scale` turns them into a mean.
    fn step(
        &mut self,
        model: &mut TransformerModel,
        grad: &TransformerModel,
        scale: f32,
        lr: f32,
        clip: f32,
    ) {
        let norm_sq: f64 = grad
            .tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| (*g * scale) as f64 * (*g * scale) as f64)
            .sum();
        let norm = norm_sq.sqrt() as f32;
        let mut scale = scale;
        if clip > 0.0 && norm > clip {
            scale *= clip / norm;
        }
        self.t += 1;
        match (self.kind, &mut self.moments) {
            (Optimizer::Adam { beta1, beta2, eps }, Some((m1, m2))) => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                let params = model.tensors_mut();
                let grads = grad.tensors();
                for (((w, g), a), b) in params
                    .into_iter()
                    .zip(grads)
                    .zip(m1.tensors_mut())
                    .zip(m2.tensors_mut())
                {
                    for i in 0..w.len() {
                        let gi = g[i] * scale;
                        a[i] = beta1 * a[i] + (1.0 - beta1) * gi;
                        b[i] = beta2 * b[i] + (1.0 - beta2) * gi * gi;
                        w[i] -= lr * (a[i] / c1) / ((b[i] / c2).sqrt() + eps);
                    }
                }
            }
            _ => {
                for (w, g) in model.tensors_mut().into_iter().zip(grad.tensors()) {
                    math::axpy(-lr * scale, g, w);
                }
            }
        }
    }
}

/// Mean next-token loss of `model` over `tokens` (teacher forcing).
pub fn sequence_loss(model: &TransformerModel, tokens: &[TokenId]) -> f32 {
    let acts = forward_train(model, &tokens[..tokens.len() - 1]);
    let targets = &tokens[1..];
    let v = model.vocab_size();
    let total: f32 = targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = &acts.logits[t * v..(t + 1) * v];
            math::log_sum_exp(row) - row[y as usize]
        })
        .sum();
    total / targets.len() as f32
}

struct LayerActs {
    input: Vec<f32>,
    n1: Vec<f32>,
    stats1: Vec<NormStats>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// `[head][query][key]`, zero above the diagonal.
    probs: Vec<f32>,
    attn: Vec<f32>,
    h: Vec<f32>,
    n2: Vec<f32>,
    stats2: Vec<NormStats>,
    up_pre: Vec<f32>,
    up: Vec<f32>,
}

struct Acts {
    layers: Vec<LayerActs>,
    last: Vec<f32>,
    nf: Vec<f32>,
    statsf: Vec<NormStats>,
    logits: Vec<f32>,
}

fn forward_train(model: &TransformerModel, inputs: &[TokenId]) -> Acts {
    let cfg = model.config();
    let (t_len, d, f, heads, hd) = (
        inputs.len(),
        cfg.hidden_dim,
        cfg.ffn_dim,
        cfg.num_heads,
        cfg.head_dim(),
    );
    let scale = 1.0 / (hd as f32).sqrt();
    let mut x = Vec::with_capacity(t_len * d);
    for (p, &tok) in inputs.iter().enumerate() {
        x.extend(model.embed_token(tok, p));
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for w in &model.layers {
        let input = x.clone();
        let mut n1 = vec![0.0; t_len * d];
        let mut stats1 = Vec::with_capacity(t_len);
        let (mut q, mut k, mut v) = (
            vec![0.0; t_len * d],
            vec![0.0; t_len * d],
            vec![0.0; t_len * d],
        );
        for t in 0..t_len {
            let span = t * d..(t + 1) * d;
            stats1.push(w.attn_norm.apply(&x[span.clone()], &mut n1[span.clone()]));
            math::matvec(&w.wq, &n1[span.clone()], &mut q[span.clone()]);
            math::matvec(&w.wk, &n1[span.clone()], &mut k[span.clone()]);
            math::matvec(&w.wv, &n1[span.clone()], &mut v[span.clone()]);
        }
        let mut probs = vec![0.0; heads * t_len * t_len];
        let mut attn = vec![0.0; t_len * d];
        for h in 0..heads {
            for i in 0..t_len {
                let qi = &q[i * d + h * hd..i * d + (h + 1) * hd];
                let row = &mut probs[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = math::dot(qi, &k[j * d + h * hd..j * d + (h + 1) * hd]) * scale;
                }
                math::softmax_in_place(row);
                let out = &mut attn[i * d + h * hd..i * d + (h + 1) * hd];
                for (j, p) in row.iter().enumerate() {
                    math::axpy(*p, &v[j * d + h * hd..j * d + (h + 1) * hd], out);
                }
            }
        }
        let mut h_res = x;
        let mut n2 = vec![0.0; t_len * d];
        let mut stats2 = Vec::with_capacity(t_len);
        let mut up_pre = vec![0.0; t_len * f];
        let mut up = vec![0.0; t_len * f];
        let mut out = vec![0.0; t_len * d];
        let mut tmp = vec![0.0; d];
        for t in 0..t_len {
            let span = t * d..(t + 1) * d;
            let fspan = t * f..(t + 1) * f;
            math::matvec(&w.wo, &attn[span.clone()], &mut tmp);
            for (a, b) in h_res[span.clone()].iter_mut().zip(&tmp) {
                *a += b;
            }
            stats2.push(
                w.ffn_norm
                    .apply(&h_res[span.clone()], &mut n2[span.clone()]),
            );
            math::matvec(&w.w_up, &n2[span.clone()], &mut up_pre[fspan.clone()]);
            for (u, p) in up[fspan.clone()].iter_mut().zip(&up_pre[fspan.clone()]) {
                *u = p.max(0.0);
            }
            math::matvec(&w.w_down, &up[fspan], &mut tmp);
            for ((o, a), b) in out[span.clone()].iter_mut().zip(&h_res[span]).zip(&tmp) {
                *o = a + b;
            }
        }
        layers.push(LayerActs {
            input,
            n1,
            stats1,
            q,
            k,
            v,
            probs,
            attn,
            h: h_res,
            n2,
            stats2,
            up_pre,
            up,
        });
        x = out;
    }

    let vsz = cfg.vocab_size;
    let mut nf = vec![0.0; t_len * d];
    let mut statsf = Vec::with_capacity(t_len);
    let mut logits = vec![0.0; t_len * vsz];
    for t in 0..t_len {
        let span = t * d..(t + 1) * d;
        statsf.push(
            model
                .final_norm
                .apply(&x[span.clone()], &mut nf[span.clone()]),
        );
        math::matvec(
            &model.lm_head,
            &nf[span],
            &mut logits[t * vsz..(t + 1) * vsz],
        );
    }
    Acts {
        layers,
        last: x,
        nf,
        statsf,
        logits,
    }
}

/// Summed (not averaged) loss and gradient for one window.
pub(crate) fn window_gradient(
    model: &TransformerModel,
    inputs: &[TokenId],
    targets: &[TokenId],
) -> (f32, TransformerModel) {
    let cfg = model.config();
    let (t_len, d, f, heads, hd, vsz) = (
        inputs.len(),
        cfg.hidden_dim,
        cfg.ffn_dim,
        cfg.num_heads,
        cfg.head_dim(),
        cfg.vocab_size,
    );
    let scale = 1.0 / (hd as f32).sqrt();
    let acts = forward_train(model, inputs);
    let mut g = model.zeros_like();

    let mut loss = 0.0f32;
    let mut dx = vec![0.0f32; t_len * d];
    for t in 0..t_len {
        let row = &acts.logits[t * vsz..(t + 1) * vsz];
        let y = targets[t] as usize;
        loss += math::log_sum_exp(row) - row[y];
        let mut dlogits = math::softmax(row);
        dlogits[y] -= 1.0;
        let span = t * d..(t + 1) * d;
        math::outer_acc(&dlogits, &acts.nf[span.clone()], &mut g.lm_head);
        let mut dnf = vec![0.0; d];
        math::matvec_t_acc(&model.lm_head, &dlogits, &mut dnf);
        math::layer_norm_backward(
            &acts.last[span.clone()],
            &model.final_norm.gain,
            acts.statsf[t],
            &dnf,
            &mut dx[span],
            &mut g.final_norm.gain,
            &mut g.final_norm.bias,
        );
    }

    for (l, (w, a)) in model.layers.iter().zip(&acts.layers).enumerate().rev() {
        let gl = &mut g.layers[l];
        // FFN sub-block: out = h + down(relu(up(ln2(h)))).
        let mut dh = dx.clone();
        for t in 0..t_len {
            let span = t * d..(t + 1) * d;
            let fspan = t * f..(t + 1) * f;
            math::outer_acc(&dx[span.clone()], &a.up[fspan.clone()], &mut gl.w_down);
            let mut dup = vec![0.0; f];
            math::matvec_t_acc(&w.w_down, &dx[span.clone()], &mut dup);
            for (du, p) in dup.iter_mut().zip(&a.up_pre[fspan]) {
                if *p <= 0.0 {
                    *du = 0.0;
                }
            }
            math::outer_acc(&dup, &a.n2[span.clone()], &mut gl.w_up);
            let mut dn2 = vec![0.0; d];
            math::matvec_t_acc(&w.w_up, &dup, &mut dn2);
            math::layer_norm_backward(
                &a.h[span.clone()],
                &w.ffn_norm.gain,
                a.stats2[t],
                &dn2,
                &mut dh[span],
                &mut gl.ffn_norm.gain,
                &mut gl.ffn_norm.bias,
            );
        }
        // Attention sub-block: h = x + wo(attn(ln1(x))).
        let mut dattn = vec![0.0; t_len * d];
        for t in 0..t_len {
            let span = t * d..(t + 1) * d;
            math::outer_acc(&dh[span.clone()], &a.attn[span.clone()], &mut gl.wo);
            math::matvec_t_acc(&w.wo, &dh[span.clone()], &mut dattn[span]);
        }
        let (mut dq, mut dk, mut dv) = (
            vec![0.0; t_len * d],
            vec![0.0; t_len * d],
            vec![0.0; t_len * d],
        );
        let mut dp = vec![0.0f32; t_len];
        for h in 0..heads {
            let hs = h * hd;
            for i in 0..t_len {
                let probs = &a.probs[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1];
                let da = &dattn[i * d + hs..i * d + hs + hd];
                let mut weighted = 0.0f32;
                for j in 0..=i {
                    dp[j] = math::dot(da, &a.v[j * d + hs..j * d + hs + hd]);
                    weighted += probs[j] * dp[j];
                    math::axpy(probs[j], da, &mut dv[j * d + hs..j * d + hs + hd]);
                }
                for j in 0..=i {
                    let ds = probs[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    math::axpy(
                        ds,
                        &a.k[j * d + hs..j * d + hs + hd],
                        &mut dq[i * d + hs..i * d + hs + hd],
                    );
                    math::axpy(
                        ds,
                        &a.q[i * d + hs..i * d + hs + hd],
                        &mut dk[j * d + hs..j * d + hs + hd],
                    );
                }
            }
        }
        let mut dxin = dh;
        for t in 0..t_len {
            let span = t * d..(t + 1) * d;
            let n1 = &a.n1[span.clone()];
            math::outer_acc(&dq[span.clone()], n1, &mut gl.wq);
            math::outer_acc(&dk[span.clone()], n1, &mut gl.wk);
            math::outer_acc(&dv[span.clone()], n1, &mut gl.wv);
            let mut dn1 = vec![0.0; d];
            math::matvec_t_acc(&w.wq, &dq[span.clone()], &mut dn1);
            math::matvec_t_acc(&w.wk, &dk[span.clone()], &mut dn1);
            math::matvec_t_acc(&w.wv, &dv[span.clone()], &mut dn1);
            math::layer_norm_backward(
                &a.input[span.clone()],
                &w.attn_norm.gain,
                a.stats1[t],
                &dn1,
                &mut dxin[span],
                &mut gl.attn_norm.gain,
                &mut gl.attn_norm.bias,
            );
        }
        dx = dxin;
    }

    for (t, &tok) in inputs.iter().enumerate() {
        let row = &mut g.embedding[tok as usize * d..(tok as usize + 1) * d];
        math::axpy(model.embed_scale(), &dx[t * d..(t + 1) * d], row);
    }
    (loss, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KvCache, ModelConfig};

    fn tiny(seed: u64) -> TransformerModel {
        TransformerModel::init(ModelConfig {
            vocab_size: 12,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            max_context: 32,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn training_forward_matches_inference_forward() {
        let m = tiny(3);
        let tokens = [1u32, 5, 7, 2, 9];
        let acts = forward_train(&m, &tokens);
        let mut cache = KvCache::new(&m);
        let state = m.forward_to_layer(&tokens, 1, &mut cache).unwrap();
        for (a, b) in acts.last.iter().zip(state.hidden()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = tiny(4);
        let inputs = [1u32, 5, 7, 2, 9, 3];
        let targets = [5u32, 7, 2, 9, 3, 1];
        let (_, grad) = window_gradient(&m, &inputs, &targets);
        let loss_of = |m: &TransformerModel| -> f64 {
            let acts = forward_train(m, &inputs);
            targets
                .iter()
                .enumerate()
                .map(|(t, &y)| {
                    let row = &acts.logits[t * 12..(t + 1) * 12];
                    (math::log_sum_exp(row) - row[y as usize]) as f64
                })
                .sum()
        };
        let mut rng = SplitMix64::new(99);
        let n_tensors = m.tensors().len();
        let mut checked = 0;
        for ti in 0..n_tensors {
            for _ in 0..3 {
                let len = m.tensors()[ti].len();
                let idx = rng.below(len);
                let analytic = grad.tensors()[ti][idx] as f64;
                let h = 3e-3f32;
                let mut plus = m.clone();
                plus.tensors_mut()[ti][idx] += h;
                let mut minus = m.clone();
                minus.tensors_mut()[ti][idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h as f64);
                let tol = 2e-2 * fd.abs().max(analytic.abs()) + 2e-3;
                assert!(
                    (fd - analytic).abs() <= tol,
                    "tensor {ti} idx {idx}: fd {fd} vs {analytic}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, n_tensors * 3);
    }

    #[test]
    fn repeated_byte_corpus_is_memorised() {
        let mut m = tiny(5);
        let corpus = vec![7u8; 200];
        let cfg = LmTrainConfig {
            epochs: 30,
            seq_len: 16,
            batch_size: 4,
            learning_rate: 0.5,
            optimizer: Optimizer::Sgd,
            ..Default::default()
        };
        let report = train_language_model(&mut m, &corpus, &cfg).unwrap();
        assert!(
            *report.epoch_losses.last().unwrap() < 0.1,
            "{:?}",
            report.epoch_losses
        );
    }

    #[test]
    fn training_is_deterministic_and_mode_independent() {
        let corpus: Vec<u8> = (0..300u32).map(|i| ((i * 7 + i / 5) % 12) as u8).collect();
        let run = |execution| {
            let mut m = tiny(6);
            let cfg = LmTrainConfig {
                epochs: 2,
                seq_len: 16,
                batch_size: 4,
                execution,
                ..Default::default()
            };
            let r = train_language_model(&mut m, &corpus, &cfg).unwrap();
            (r, m.to_bytes())
        };
        let a = run(Execution::Sequential);
        let b = run(Execution::Sequential);
        let c = run(Execution::Parallel);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let mut m = tiny(1);
        assert!(matches!(
            train_language_model(&mut m, b"", &LmTrainConfig::default()),
            Err(Error::Empty(_))
        ));
    }
}
