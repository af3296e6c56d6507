use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{TokenId, TransformerModel};
use crate::error::{Error, Result};
use crate::math;

/// How deeper-layer K/V entries are produced for a position that exited early.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    /// Skipped layers are run for that position when a later token first
    /// needs them. Attention stays exact.
    #[default]
    Recompute,
    /// Skipped layers get K/V projected from the exit hidden state. Cheaper,
    /// but attention for later tokens no longer matches a full forward.
    Stale,
}

#[derive(Debug, Clone, Default)]
struct LayerKv {
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Per-layer key/value cache for one stream.
///
/// Position `p` has K/V at layer `m` iff `p < layer_len(m)`; lengths never
/// increase with depth. For positions that are not complete at the last
/// layer, `frontier` keeps the hidden state after their deepest computed
/// layer so the missing layers can be filled in later.
#[derive(Debug, Clone)]
pub struct KvCache {
    dim: usize,
    layers: Vec<LayerKv>,
    frontier: VecDeque<Vec<f32>>,
}

impl KvCache {
    pub fn new(model: &TransformerModel) -> Self {
        Self {
            dim: model.hidden_dim(),
            layers: vec![LayerKv::default(); model.num_layers()],
            frontier: VecDeque::new(),
        }
    }

    /// Positions seen by layer 0.
    pub fn len(&self) -> usize {
        self.layer_len(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].keys.len() / self.dim
    }

    /// Positions with K/V at every layer.
    pub fn complete_len(&self) -> usize {
        self.layer_len(self.layers.len() - 1)
    }

    pub fn pending(&self) -> usize {
        self.len() - self.complete_len()
    }

    pub fn key(&self, layer: usize, pos: usize) -> &[f32] {
        &self.layers[layer].keys[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn value(&self, layer: usize, pos: usize) -> &[f32] {
        &self.layers[layer].values[pos * self.dim..(pos + 1) * self.dim]
    }

    /// Drops every position at or beyond `len`.
    pub fn truncate(&mut self, len: usize) {
        let complete = self.complete_len();
        let old_len = self.len();
        for layer in &mut self.layers {
            let keep = (layer.keys.len() / self.dim).min(len) * self.dim;
            layer.keys.truncate(keep);
            layer.values.truncate(keep);
        }
        if len <= complete {
            self.frontier.clear();
        } else if len < old_len {
            self.frontier.truncate(len - complete);
        }
    }

    fn push_kv(&mut self, layer: usize, pos: usize, key: &[f32], value: &[f32]) -> Result<()> {
        if self.layer_len(layer) != pos {
            return Err(Error::CacheState(format!(
                "layer {layer} holds {} positions, cannot append position {pos}",
                self.layer_len(layer)
            )));
        }
        self.layers[layer].keys.extend_from_slice(key);
        self.layers[layer].values.extend_from_slice(value);
        Ok(())
    }

    /// Records the hidden state of `pos` after `layer` has been computed for it.
    fn record_hidden(&mut self, pos: usize, layer: usize, hidden: &[f32]) {
        let last = self.layers.len() - 1;
        if layer == last {
            if last > 0 {
                self.frontier.pop_front();
            }
            return;
        }
        let idx = pos - self.complete_len();
        if idx == self.frontier.len() {
            self.frontier.push_back(hidden.to_vec());
        } else {
            self.frontier[idx].copy_from_slice(hidden);
        }
    }

    /// Appends a position whose K/V were computed elsewhere (an accepted
    /// tree node) for layers `0..keys.len()`.
    pub(crate) fn push_computed(
        &mut self,
        keys: &[&[f32]],
        values: &[&[f32]],
        hidden: &[f32],
    ) -> Result<()> {
        let pos = self.len();
        for (layer, (k, v)) in keys.iter().zip(values).enumerate() {
            self.push_kv(layer, pos, k, v)?;
            self.record_hidden(pos, layer, hidden);
        }
        Ok(())
    }
}

/// Hidden states of a run of consecutive positions after `completed` layers.
#[derive(Debug, Clone)]
pub struct LayerState {
    completed: usize,
    start: usize,
    dim: usize,
    hidden: Vec<f32>,
}

impl LayerState {
    /// Index of the last layer applied, or `None` right after embedding.
    pub fn layer_index(&self) -> Option<usize> {
        self.completed.checked_sub(1)
    }

    pub fn layers_completed(&self) -> usize {
        self.completed
    }

    pub fn start_position(&self) -> usize {
        self.start
    }

    pub fn rows(&self) -> usize {
        self.hidden.len() / self.dim
    }

    pub fn hidden(&self) -> &[f32] {
        &self.hidden
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.hidden[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_hidden(&self) -> &[f32] {
        self.row(self.rows() - 1)
    }
}

/// Scratch outputs of the attention sub-block for one position.
struct Projection {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

impl TransformerModel {
    pub fn embed(&self, tokens: &[TokenId], cache: &KvCache) -> Result<LayerState> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let start = cache.len();
        let end = start + tokens.len();
        if end > self.config().max_context {
            return Err(Error::ContextOverflow {
                len: end,
                max: self.config().max_context,
            });
        }
        let d = self.hidden_dim();
        let mut hidden = Vec::with_capacity(tokens.len() * d);
        for (i, &t) in tokens.iter().enumerate() {
            self.check_token(t)?;
            hidden.extend(self.embed_token(t, start + i));
        }
        Ok(LayerState {
            completed: 0,
            start,
            dim: d,
            hidden,
        })
    }

    /// Runs layers `0..=stop_layer` for `tokens` appended after the cached context.
    pub fn forward_to_layer(
        &self,
        tokens: &[TokenId],
        stop_layer: usize,
        cache: &mut KvCache,
    ) -> Result<LayerState> {
        self.check_layer(stop_layer)?;
        let mut state = self.embed(tokens, cache)?;
        self.continue_to_layer(&mut state, stop_layer, cache)?;
        Ok(state)
    }

    /// Resumes a partially computed state up to and including `stop_layer`.
    pub fn continue_to_layer(
        &self,
        state: &mut LayerState,
        stop_layer: usize,
        cache: &mut KvCache,
    ) -> Result<()> {
        self.check_layer(stop_layer)?;
        if stop_layer + 1 < state.completed {
            return Err(Error::CacheState(format!(
                "state already past layer {stop_layer} (completed {})",
                state.completed
            )));
        }
        while state.completed <= stop_layer {
            self.step_layer(state, cache)?;
        }
        Ok(())
    }

    /// Applies the next layer to every row of `state`, first filling in that
    /// layer for any earlier positions that exited before reaching it.
    pub fn step_layer(&self, state: &mut LayerState, cache: &mut KvCache) -> Result<()> {
        let layer = state.completed;
        self.check_layer(layer)?;
        self.catch_up(layer, state.start, cache)?;
        for r in 0..state.rows() {
            let pos = state.start + r;
            let d = self.hidden_dim();
            let row = &mut state.hidden[r * d..(r + 1) * d];
            self.cached_position(layer, pos, row, cache)?;
            cache.record_hidden(pos, layer, row);
        }
        state.completed += 1;
        Ok(())
    }

    /// Computes `layer` for pending positions `[layer_len(layer), until)`.
    pub(crate) fn catch_up(&self, layer: usize, until: usize, cache: &mut KvCache) -> Result<()> {
        while cache.layer_len(layer) < until {
            let pos = cache.layer_len(layer);
            let idx = pos
                .checked_sub(cache.complete_len())
                .filter(|i| *i < cache.frontier.len())
                .ok_or_else(|| {
                    Error::CacheState(format!("no frontier state for position {pos}"))
                })?;
            let mut x = cache.frontier[idx].clone();
            self.cached_position(layer, pos, &mut x, cache)?;
            cache.record_hidden(pos, layer, &x);
        }
        Ok(())
    }

    /// Fills every layer of every pending position with K/V projected from
    /// its frontier hidden state ([`KvMode::Stale`]).
    pub fn fill_stale(&self, cache: &mut KvCache) -> Result<()> {
        let last = self.num_layers() - 1;
        for layer in 0..=last {
            while cache.layer_len(layer) < cache.len() {
                let pos = cache.layer_len(layer);
                let x = cache.frontier[pos - cache.complete_len()].clone();
                let p = self.project(layer, &x);
                cache.push_kv(layer, pos, &p.k, &p.v)?;
                cache.record_hidden(pos, layer, &x);
            }
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer < self.num_layers() {
            Ok(())
        } else {
            Err(Error::LayerOutOfRange {
                layer,
                num_layers: self.num_layers(),
            })
        }
    }

    fn project(&self, layer: usize, x: &[f32]) -> Projection {
        let w = &self.layers[layer];
        let d = self.hidden_dim();
        let mut normed = vec![0.0; d];
        w.attn_norm.apply(x, &mut normed);
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        math::matvec(&w.wq, &normed, &mut q);
        math::matvec(&w.wk, &normed, &mut k);
        math::matvec(&w.wv, &normed, &mut v);
        Projection { q, k, v }
    }

    fn cached_position(
        &self,
        layer: usize,
        pos: usize,
        x: &mut [f32],
        cache: &mut KvCache,
    ) -> Result<()> {
        let p = self.project(layer, x);
        cache.push_kv(layer, pos, &p.k, &p.v)?;
        let cache = &*cache;
        self.finish_position(
            layer,
            x,
            &p.q,
            pos + 1,
            |j| cache.key(layer, j),
            |j| cache.value(layer, j),
        );
        Ok(())
    }

    /// Attention over `n` keys (in position order), output projection,
    /// residual, then the FFN sub-block. Shared by the cached and tree paths.
    fn finish_position<'a>(
        &self,
        layer: usize,
        x: &mut [f32],
        q: &[f32],
        n: usize,
        key: impl Fn(usize) -> &'a [f32],
        value: impl Fn(usize) -> &'a [f32],
    ) {
        let w = &self.layers[layer];
        let d = self.hidden_dim();
        let hd = self.config().head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut attn = vec![0.0f32; d];
        let mut scores = vec![0.0f32; n];
        for h in 0..self.config().num_heads {
            let span = h * hd..(h + 1) * hd;
            let qh = &q[span.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = math::dot(qh, &key(j)[span.clone()]) * scale;
            }
            math::softmax_in_place(&mut scores);
            let out = &mut attn[span.clone()];
            for (j, s) in scores.iter().enumerate() {
                math::axpy(*s, &value(j)[span.clone()], out);
            }
        }
        let mut proj = vec![0.0f32; d];
        math::matvec(&w.wo, &attn, &mut proj);
        for (xi, pi) in x.iter_mut().zip(&proj) {
            *xi += pi;
        }

        let mut normed = vec![0.0f32; d];
        w.ffn_norm.apply(x, &mut normed);
        let mut up = vec![0.0f32; self.config().ffn_dim];
        math::matvec(&w.w_up, &normed, &mut up);
        for u in up.iter_mut() {
            *u = u.max(0.0);
        }
        let mut down = vec![0.0f32; d];
        math::matvec(&w.w_down, &up, &mut down);
        for (xi, di) in x.iter_mut().zip(&down) {
            *xi += di;
        }
    }

    /// Hidden state of the last token after each layer, from a fresh cache.
    pub fn layer_hiddens(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f32>>> {
        let mut cache = KvCache::new(self);
        let mut state = self.embed(tokens, &cache)?;
        let mut out = Vec::with_capacity(self.num_layers());
        for _ in 0..self.num_layers() {
            self.step_layer(&mut state, &mut cache)?;
            out.push(state.last_hidden().to_vec());
        }
        Ok(out)
    }

    /// Final-layer hidden state of the last token.
    pub fn forward_full(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        let mut cache = KvCache::new(self);
        let state = self.forward_to_layer(tokens, self.num_layers() - 1, &mut cache)?;
        Ok(state.last_hidden().to_vec())
    }

    /// Next-token logits for the last token after a full forward pass.
    pub fn next_token_logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        self.full_head_logits(&self.forward_full(tokens)?)
    }
}

/// Tree nodes evaluated on top of a cached context with an ancestor-only mask.
///
/// Node `i` sits at position `context_len - 1 + depth[i]`, where position
/// `context_len - 1` is the tree root already present in the cache. It
/// attends to every cached position, then to its ancestors in depth order,
/// then to itself.
#[derive(Debug, Clone)]
pub(crate) struct TreeBatch {
    context_len: usize,
    chains: Vec<Vec<usize>>,
    pub(crate) hidden: Vec<Vec<f32>>,
    pub(crate) keys: Vec<Vec<Vec<f32>>>,
    pub(crate) values: Vec<Vec<Vec<f32>>>,
    completed: usize,
}

impl TreeBatch {
    /// `parents[i]` is the parent batch index of node `i`, or `None` when the
    /// parent is the root. Parents must precede their children.
    pub(crate) fn new(
        model: &TransformerModel,
        context_len: usize,
        tokens: &[TokenId],
        parents: &[Option<usize>],
    ) -> Result<Self> {
        let mut chains: Vec<Vec<usize>> = Vec::with_capacity(tokens.len());
        for (i, parent) in parents.iter().enumerate() {
            let mut chain = match parent {
                Some(p) if *p < i => chains[*p].clone(),
                Some(_) => return Err(Error::CacheState("tree parent must precede child".into())),
                None => Vec::new(),
            };
            chain.push(i);
            chains.push(chain);
        }
        let max_pos = context_len - 1 + chains.iter().map(Vec::len).max().unwrap_or(0);
        if max_pos >= model.config().max_context {
            return Err(Error::ContextOverflow {
                len: max_pos + 1,
                max: model.config().max_context,
            });
        }
        let mut hidden = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            model.check_token(t)?;
            let pos = context_len - 1 + chains[i].len();
            hidden.push(model.embed_token(t, pos).collect());
        }
        Ok(Self {
            context_len,
            chains,
            hidden,
            keys: Vec::new(),
            values: Vec::new(),
            completed: 0,
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.hidden.len()
    }
}

impl TransformerModel {
    /// Applies the next layer to all tree nodes. The cache must already hold
    /// that layer for all `context_len` context positions.
    pub(crate) fn step_tree_layer(&self, batch: &mut TreeBatch, cache: &KvCache) -> Result<()> {
        let layer = batch.completed;
        self.check_layer(layer)?;
        if cache.layer_len(layer) != batch.context_len {
            return Err(Error::CacheState(format!(
                "tree layer {layer} needs {} cached positions, found {}",
                batch.context_len,
                cache.layer_len(layer)
            )));
        }
        let n = batch.len();
        let mut queries = Vec::with_capacity(n);
        let mut keys = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for x in &batch.hidden {
            let p = self.project(layer, x);
            queries.push(p.q);
            keys.push(p.k);
            values.push(p.v);
        }
        let ctx = batch.context_len;
        for i in 0..n {
            let chain = &batch.chains[i];
            let total = ctx + chain.len();
            let key = |j: usize| {
                if j < ctx {
                    cache.key(layer, j)
                } else {
                    &keys[chain[j - ctx]][..]
                }
            };
            let value = |j: usize| {
                if j < ctx {
                    cache.value(layer, j)
                } else {
                    &values[chain[j - ctx]][..]
                }
            };
            let mut x = std::mem::take(&mut batch.hidden[i]);
            self.finish_position(layer, &mut x, &queries[i], total, key, value);
            batch.hidden[i] = x;
        }
        batch.keys.push(keys);
        batch.values.push(values);
        batch.completed += 1;
        Ok(())
    }
}
