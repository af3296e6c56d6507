//! Which layers run a predictor for the next token.
//!
//! Offline, exit counts from a profiling run rank the layers. Online, a
//! circular queue of the last `N` exit layers marks every layer within
//! `radius` of a recent exit. The active set is the offline top-k united
//! with the online neighbourhood, restricted to layers that can exit early
//! (`0..=L-2`).

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{generate, EngineConfig, ExitPolicy};
use crate::error::{Error, Result};
use crate::model::io::Reader;
use crate::model::{TokenId, TransformerModel};
use crate::par::Execution;

pub const PROFILE_MAGIC: &[u8; 4] = b"SPXS";
pub const PROFILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub queue_len: usize,
    pub radius: usize,
    pub offline_top_k: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            queue_len: 5,
            radius: 2,
            offline_top_k: 4,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.queue_len == 0 {
            return Err(Error::InvalidConfig("queue_len must be at least 1".into()));
        }
        if self.offline_top_k > num_layers.saturating_sub(1) {
            return Err(Error::InvalidConfig(format!(
                "offline_top_k {} exceeds the {} layers that can exit early",
                self.offline_top_k,
                num_layers.saturating_sub(1)
            )));
        }
        Ok(())
    }

    /// Largest possible active set.
    pub fn union_bound(&self) -> usize {
        self.offline_top_k + self.queue_len * (2 * self.radius + 1)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Every layer except the last runs its predictor.
    AllLayers,
    #[default]
    TwoLevel,
}

/// Verified early-exit counts per layer and the resulting ranking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfflineProfile {
    /// One count per layer, including the last (which never ranks).
    pub exit_counts: Vec<u64>,
    /// Layers `0..L-1` by count, descending; equal counts in id order.
    pub ranked_layers: Vec<usize>,
    /// Fingerprint of the model weights the profile was measured on.
    pub model_fingerprint: u64,
}

impl OfflineProfile {
    pub fn from_counts(exit_counts: Vec<u64>, model_fingerprint: u64) -> Result<Self> {
        if exit_counts.is_empty() {
            return Err(Error::Empty("exit counts"));
        }
        let mut ranked_layers: Vec<usize> = (0..exit_counts.len() - 1).collect();
        ranked_layers.sort_by(|&a, &b| exit_counts[b].cmp(&exit_counts[a]).then(a.cmp(&b)));
        Ok(Self {
            exit_counts,
            ranked_layers,
            model_fingerprint,
        })
    }

    /// Profile from a list of exit layers (final-layer entries count too but never rank).
    pub fn from_exit_layers(
        num_layers: usize,
        exits: &[usize],
        model_fingerprint: u64,
    ) -> Result<Self> {
        let mut counts = vec![0u64; num_layers];
        for &e in exits {
            if e >= num_layers {
                return Err(Error::LayerOutOfRange {
                    layer: e,
                    num_layers,
                });
            }
            counts[e] += 1;
        }
        Self::from_counts(counts, model_fingerprint)
    }

    pub fn num_layers(&self) -> usize {
        self.exit_counts.len()
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.ranked_layers[..k.min(self.ranked_layers.len())]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.exit_counts.len());
        out.extend_from_slice(PROFILE_MAGIC);
        out.extend_from_slice(&PROFILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.exit_counts.len() as u32).to_le_bytes());
        for c in &self.exit_counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&self.model_fingerprint.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(PROFILE_MAGIC)?;
        r.version(PROFILE_VERSION)?;
        let layers = r.u32()? as usize;
        if layers == 0 {
            return Err(Error::Format("profile with zero layers".into()));
        }
        let counts = (0..layers).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let fingerprint = r.u64()?;
        r.finish()?;
        Self::from_counts(counts, fingerprint)
    }
}

pub fn save_profile(profile: &OfflineProfile, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, profile.to_bytes())?;
    Ok(())
}

/// Loads a profile and checks it was measured on the model with `expected_fingerprint`.
pub fn load_profile(path: impl AsRef<Path>, expected_fingerprint: u64) -> Result<OfflineProfile> {
    let profile = OfflineProfile::from_bytes(&fs::read(path)?)?;
    if profile.model_fingerprint != expected_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: expected_fingerprint,
            actual: profile.model_fingerprint,
        });
    }
    Ok(profile)
}

/// Recent exit layers and how many of them lie near each layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnlineState {
    capacity: usize,
    radius: usize,
    queue: VecDeque<usize>,
    neighbor_counts: Vec<u32>,
}

impl OnlineState {
    pub fn new(num_layers: usize, config: &ScheduleConfig) -> Self {
        Self {
            capacity: config.queue_len.max(1),
            radius: config.radius,
            queue: VecDeque::with_capacity(config.queue_len),
            neighbor_counts: vec![0; num_layers],
        }
    }

    pub fn queue(&self) -> impl Iterator<Item = usize> + '_ {
        self.queue.iter().copied()
    }

    pub fn neighbor_counts(&self) -> &[u32] {
        &self.neighbor_counts
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    fn neighbourhood(&self, layer: usize) -> std::ops::RangeInclusive<usize> {
        layer.saturating_sub(self.radius)
            ..=(layer + self.radius).min(self.neighbor_counts.len() - 1)
    }

    /// Records the exit layer of the token just emitted.
    pub fn update(&mut self, exit_layer: usize) -> Result<()> {
        let n = self.neighbor_counts.len();
        if exit_layer >= n {
            return Err(Error::LayerOutOfRange {
                layer: exit_layer,
                num_layers: n,
            });
        }
        if self.queue.len() == self.capacity {
            let old = self.queue.pop_front().expect("full queue");
            for i in self.neighbourhood(old) {
                self.neighbor_counts[i] -= 1;
            }
        }
        for i in self.neighbourhood(exit_layer) {
            self.neighbor_counts[i] += 1;
        }
        self.queue.push_back(exit_layer);
        Ok(())
    }

    /// Neighbour counts rebuilt from the queue alone.
    pub fn recompute(&self) -> Vec<u32> {
        let mut counts = vec![0; self.neighbor_counts.len()];
        for &e in &self.queue {
            for i in self.neighbourhood(e) {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Layers with a non-zero neighbour count (unrestricted).
    pub fn near_layers(&self) -> Vec<usize> {
        (0..self.neighbor_counts.len())
            .filter(|&i| self.neighbor_counts[i] > 0)
            .collect()
    }
}

/// Offline top-k united with the online neighbourhood, limited to `0..=L-2`, ascending.
pub fn active_layers(
    profile: &OfflineProfile,
    state: &OnlineState,
    config: &ScheduleConfig,
) -> Vec<usize> {
    let limit = profile.num_layers().saturating_sub(1);
    let mut active = vec![false; limit];
    for &l in profile.top(config.offline_top_k) {
        active[l] = true;
    }
    for (i, &c) in state.neighbor_counts.iter().enumerate().take(limit) {
        if c > 0 {
            active[i] = true;
        }
    }
    (0..limit).filter(|&i| active[i]).collect()
}

/// Per-stream scheduling state.
#[derive(Debug, Clone)]
pub struct Scheduler {
    mode: ScheduleMode,
    config: ScheduleConfig,
    profile: Option<OfflineProfile>,
    online: OnlineState,
    num_layers: usize,
}

impl Scheduler {
    /// Predictors at every layer but the last.
    pub fn all_layers(num_layers: usize) -> Self {
        let config = ScheduleConfig::default();
        Self {
            mode: ScheduleMode::AllLayers,
            online: OnlineState::new(num_layers, &config),
            config,
            profile: None,
            num_layers,
        }
    }

    pub fn two_level(profile: OfflineProfile, config: ScheduleConfig) -> Result<Self> {
        let num_layers = profile.num_layers();
        config.validate(num_layers)?;
        Ok(Self {
            mode: ScheduleMode::TwoLevel,
            online: OnlineState::new(num_layers, &config),
            config,
            profile: Some(profile),
            num_layers,
        })
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn online(&self) -> &OnlineState {
        &self.online
    }

    pub fn active_layers(&self) -> Vec<usize> {
        match (&self.mode, &self.profile) {
            (ScheduleMode::TwoLevel, Some(profile)) => {
                active_layers(profile, &self.online, &self.config)
            }
            _ => (0..self.num_layers.saturating_sub(1)).collect(),
        }
    }

    pub fn record_exit(&mut self, exit_layer: usize) -> Result<()> {
        self.online.update(exit_layer)
    }
}

/// Generates `gen_len` tokens after each prompt with predictors active at
/// every layer and counts where verified early exits happen. Tokens that
/// run to the final layer are not counted.
pub fn profile_offline(
    target: &TransformerModel,
    draft: &TransformerModel,
    policy: &ExitPolicy,
    prompts: &[Vec<TokenId>],
    gen_len: usize,
    config: EngineConfig,
    execution: Execution,
) -> Result<OfflineProfile> {
    if prompts.is_empty() {
        return Err(Error::Empty("profiling prompts"));
    }
    let num_layers = target.num_layers();
    let traces = execution.map(prompts, |prompt| {
        generate(
            target,
            draft,
            policy,
            Scheduler::all_layers(num_layers),
            config,
            prompt,
            gen_len,
        )
    });
    let mut counts = vec![0u64; num_layers];
    for trace in traces {
        for r in trace?.records.iter().filter(|r| r.verified) {
            counts[r.exit_layer] += 1;
        }
    }
    OfflineProfile::from_counts(counts, target.fingerprint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn cfg(top: usize) -> ScheduleConfig {
        ScheduleConfig {
            queue_len: 5,
            radius: 2,
            offline_top_k: top,
        }
    }

    #[test]
    fn single_entry_marks_its_neighbourhood() {
        let mut s = OnlineState::new(32, &cfg(0));
        s.update(10).unwrap();
        for (i, c) in s.neighbor_counts().iter().enumerate() {
            assert_eq!(*c, u32::from((8..=12).contains(&i)), "layer {i}");
        }
    }

    #[test]
    fn sixth_push_evicts_the_first() {
        let mut s = OnlineState::new(32, &cfg(0));
        for e in [0, 20, 20, 20, 20] {
            s.update(e).unwrap();
        }
        assert_eq!(s.neighbor_counts()[0], 1);
        s.update(20).unwrap();
        assert_eq!(&s.neighbor_counts()[..3], &[0, 0, 0]);
        assert_eq!(s.neighbor_counts()[20], 5);
    }

    #[test]
    fn incremental_counts_match_recomputation() {
        let mut rng = SplitMix64::new(3);
        let mut s = OnlineState::new(12, &cfg(0));
        for _ in 0..500 {
            s.update(rng.below(12)).unwrap();
            assert_eq!(s.neighbor_counts(), &s.recompute()[..]);
        }
    }

    #[test]
    fn cold_start_is_offline_top_k() {
        let p = OfflineProfile::from_counts(vec![1, 9, 3, 9, 0, 7, 100], 0).unwrap();
        assert_eq!(p.ranked_layers, vec![1, 3, 5, 2, 0, 4]);
        let s = OnlineState::new(7, &cfg(3));
        assert_eq!(active_layers(&p, &s, &cfg(3)), vec![1, 3, 5]);
    }

    #[test]
    fn clustered_queue_gives_one_window() {
        let p = OfflineProfile::from_counts(vec![0; 32], 0).unwrap();
        let mut s = OnlineState::new(32, &cfg(0));
        for _ in 0..5 {
            s.update(20).unwrap();
        }
        assert_eq!(active_layers(&p, &s, &cfg(0)), vec![18, 19, 20, 21, 22]);
    }

    #[test]
    fn final_layer_exits_are_clipped() {
        let p = OfflineProfile::from_counts(vec![0; 8], 0).unwrap();
        let mut s = OnlineState::new(8, &cfg(0));
        s.update(7).unwrap();
        assert_eq!(active_layers(&p, &s, &cfg(0)), vec![5, 6]);
    }

    #[test]
    fn injected_counts_rank_by_frequency() {
        let mut counts = vec![0; 8];
        counts[2] = 10;
        counts[5] = 3;
        let p = OfflineProfile::from_counts(counts, 0).unwrap();
        assert_eq!(&p.ranked_layers[..3], &[2, 5, 0]);
        let zero = OfflineProfile::from_counts(vec![0; 8], 0).unwrap();
        assert_eq!(zero.ranked_layers, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn profile_file_round_trip_and_validation() {
        let p = OfflineProfile::from_counts(vec![4, 0, 2, 9], 0xABCD).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profile.spxs");
        save_profile(&p, &path).unwrap();
        assert_eq!(load_profile(&path, 0xABCD).unwrap(), p);
        assert!(matches!(
            load_profile(&path, 1),
            Err(Error::FingerprintMismatch { .. })
        ));
        let bytes = p.to_bytes();
        assert!(OfflineProfile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn hand_built_profile_file() {
        let mut bytes = b"SPXS".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for c in [5u64, 8, 1] {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        bytes.extend_from_slice(&42u64.to_le_bytes());
        let p = OfflineProfile::from_bytes(&bytes).unwrap();
        assert_eq!(p.exit_counts, vec![5, 8, 1]);
        assert_eq!(p.ranked_layers, vec![1, 0]);
        assert_eq!(p.model_fingerprint, 42);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(7).validate(8).is_ok());
        assert!(cfg(8).validate(8).is_err());
        assert!(ScheduleConfig {
            queue_len: 0,
            ..cfg(0)
        }
        .validate(8)
        .is_err());
        assert!(
            Scheduler::two_level(OfflineProfile::from_counts(vec![0; 4], 0).unwrap(), cfg(4))
                .is_err()
        );
    }

    fn tiny_model(seed: u64, layers: usize) -> TransformerModel {
        TransformerModel::init(crate::model::ModelConfig {
            vocab_size: 16,
            hidden_dim: 8,
            num_layers: layers,
            num_heads: 2,
            ffn_dim: 16,
            max_context: 64,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn profiling_never_exit_counts_nothing() {
        let (t, d) = (tiny_model(1, 4), tiny_model(2, 1));
        let prompts = vec![vec![1, 2, 3], vec![4, 5]];
        let cfg = EngineConfig::default();
        let p = profile_offline(
            &t,
            &d,
            &ExitPolicy::Constant(0.0),
            &prompts,
            6,
            cfg,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(p.exit_counts, vec![0; 4]);
        assert_eq!(p.ranked_layers, vec![0, 1, 2]);
        assert_eq!(p.model_fingerprint, t.fingerprint());
        assert!(profile_offline(
            &t,
            &d,
            &ExitPolicy::Oracle,
            &[],
            6,
            cfg,
            Execution::Sequential
        )
        .is_err());
    }

    #[test]
    fn profiling_matches_oracle_exits_and_is_deterministic() {
        let (t, d) = (tiny_model(3, 4), tiny_model(4, 1));
        let prompts = vec![vec![1, 2, 3], vec![9, 9, 9, 0]];
        let cfg = EngineConfig {
            full_vocab: true,
            ..EngineConfig::default()
        };
        let run = |e| profile_offline(&t, &d, &ExitPolicy::Oracle, &prompts, 8, cfg, e).unwrap();
        let p = run(Execution::Sequential);
        assert_eq!(p, run(Execution::Parallel));
        let mut expect = vec![0u64; 4];
        for prompt in &prompts {
            let mut ctx = prompt.clone();
            for tok in crate::engine::greedy_generate(&t, prompt, 8).unwrap() {
                let l = crate::engine::oracle_exit_layer(&t, &ctx).unwrap();
                if l < 3 {
                    expect[l] += 1;
                }
                ctx.push(tok);
            }
        }
        assert_eq!(p.exit_counts, expect);
    }
}
