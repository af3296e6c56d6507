//! Bench metrics computed from exit traces and a full-depth reference pass.
//!
//! The reference for each generated position is the table of full-head
//! argmaxes after every layer, computed on the same context the engine saw.
//! Its last entry is the full model's greedy token; the first layer that
//! agrees with it is the oracle exit layer.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{earliest_agreement, position_layer_argmaxes, ExitRecord, GenerationTrace};
use crate::error::{Error, Result};
use crate::scheduler::{OnlineState, ScheduleConfig};
use crate::tree::TreeStepResult;

/// `[position][layer]` reference argmaxes for every token of `trace`.
pub fn reference_argmaxes(
    target: &crate::model::TransformerModel,
    trace: &GenerationTrace,
) -> Result<Vec<Vec<usize>>> {
    if trace.tokens.is_empty() {
        return Err(Error::Empty("trace"));
    }
    let mut seq = trace.prompt.clone();
    seq.extend_from_slice(&trace.tokens[..trace.tokens.len() - 1]);
    position_layer_argmaxes(target, &seq, trace.prompt.len() - 1)
}

/// Predictor decisions at one layer against the oracle label
/// (layer argmax equals final argmax).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    fn add(&mut self, fired: bool, label: bool) {
        match (fired, label) {
            (true, true) => self.true_pos += 1,
            (true, false) => self.false_pos += 1,
            (false, false) => self.true_neg += 1,
            (false, true) => self.false_neg += 1,
        }
    }

    fn merge(&mut self, o: &Confusion) {
        self.true_pos += o.true_pos;
        self.false_pos += o.false_pos;
        self.true_neg += o.true_neg;
        self.false_neg += o.false_neg;
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub confusion: Confusion,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Running sums over any number of traces.
#[derive(Debug, Clone, PartialEq)]
pub struct Tally {
    num_layers: usize,
    online: ScheduleConfig,
    tokens: u64,
    exit_sum: u64,
    oracle_sum: u64,
    agree: u64,
    early_exits: u64,
    active_sum: u64,
    evals: u64,
    projections: u64,
    confusion: Vec<Confusion>,
    /// Tokens with a non-empty online set, hits among them, and the summed
    /// hit probability of a uniformly placed set of the same size.
    online_tokens: u64,
    online_hits: u64,
    base_rate_sum: f64,
}

impl Tally {
    pub fn new(num_layers: usize, online: ScheduleConfig) -> Self {
        Self {
            num_layers,
            online,
            tokens: 0,
            exit_sum: 0,
            oracle_sum: 0,
            agree: 0,
            early_exits: 0,
            active_sum: 0,
            evals: 0,
            projections: 0,
            confusion: vec![Confusion::default(); num_layers],
            online_tokens: 0,
            online_hits: 0,
            base_rate_sum: 0.0,
        }
    }

    /// Adds one stream. `reference[i]` must be the layer argmaxes for `records[i]`'s context.
    pub fn add(&mut self, records: &[ExitRecord], reference: &[Vec<usize>]) -> Result<()> {
        if records.len() != reference.len() {
            return Err(Error::LengthMismatch(format!(
                "{} records, {} reference positions",
                records.len(),
                reference.len()
            )));
        }
        let l = self.num_layers;
        let mut online = OnlineState::new(l, &self.online);
        for (r, argmaxes) in records.iter().zip(reference) {
            if argmaxes.len() != l {
                return Err(Error::LengthMismatch(format!(
                    "{} layer argmaxes for {l} layers",
                    argmaxes.len()
                )));
            }
            if r.exit_layer >= l {
                return Err(Error::LayerOutOfRange {
                    layer: r.exit_layer,
                    num_layers: l,
                });
            }
            let full = argmaxes[l - 1];
            let oracle = earliest_agreement(argmaxes);
            self.tokens += 1;
            self.exit_sum += r.exit_layer as u64;
            self.oracle_sum += oracle as u64;
            self.agree += (r.token as usize == full) as u64;
            self.early_exits += r.verified as u64;
            self.active_sum += r.active_layers.len() as u64;
            self.projections += r.full_head_projections as u64;
            for e in &r.evals {
                if e.layer >= l {
                    return Err(Error::LayerOutOfRange {
                        layer: e.layer,
                        num_layers: l,
                    });
                }
                self.evals += 1;
                self.confusion[e.layer].add(e.fired, argmaxes[e.layer] == full);
            }
            let near: Vec<usize> = online
                .near_layers()
                .into_iter()
                .filter(|&x| x + 1 < l)
                .collect();
            if !near.is_empty() {
                self.online_tokens += 1;
                self.online_hits += near.contains(&oracle) as u64;
                self.base_rate_sum += near.len() as f64 / l as f64;
            }
            online.update(r.exit_layer)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Tally) -> Result<()> {
        if other.num_layers != self.num_layers {
            return Err(Error::LengthMismatch(format!(
                "{} vs {} layers",
                self.num_layers, other.num_layers
            )));
        }
        self.tokens += other.tokens;
        self.exit_sum += other.exit_sum;
        self.oracle_sum += other.oracle_sum;
        self.agree += other.agree;
        self.early_exits += other.early_exits;
        self.active_sum += other.active_sum;
        self.evals += other.evals;
        self.projections += other.projections;
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            a.merge(b);
        }
        self.online_tokens += other.online_tokens;
        self.online_hits += other.online_hits;
        self.base_rate_sum += other.base_rate_sum;
        Ok(())
    }

    pub fn report(&self, name: &str) -> Result<DatasetReport> {
        if self.tokens == 0 {
            return Err(Error::Empty("bench tokens"));
        }
        let n = self.tokens as f64;
        let hit_rate = ratio(self.online_hits, self.online_tokens);
        let base_rate =
            (self.online_tokens > 0).then(|| self.base_rate_sum / self.online_tokens as f64);
        Ok(DatasetReport {
            name: name.to_string(),
            tokens: self.tokens,
            avg_exit_layer: self.exit_sum as f64 / n,
            oracle_avg_exit_layer: self.oracle_sum as f64 / n,
            agreement: self.agree as f64 / n,
            early_exit_rate: self.early_exits as f64 / n,
            active_layer_avg: self.active_sum as f64 / n,
            predictor_evals: self.evals,
            full_head_projections: self.projections,
            context_hit_rate: hit_rate,
            context_base_rate: base_rate,
            context_ratio: hit_rate
                .zip(base_rate)
                .and_then(|(h, b)| (b > 0.0).then(|| h / b)),
            per_layer: self
                .confusion
                .iter()
                .enumerate()
                .filter(|(_, c)| c.total() > 0)
                .map(|(layer, c)| LayerStats {
                    layer,
                    confusion: *c,
                    precision: c.precision(),
                    recall: c.recall(),
                })
                .collect(),
        })
    }
}

/// One row of a bench report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub name: String,
    pub tokens: u64,
    pub avg_exit_layer: f64,
    pub oracle_avg_exit_layer: f64,
    /// Fraction of positions whose token equals the full model's greedy token on the same context.
    pub agreement: f64,
    pub early_exit_rate: f64,
    pub active_layer_avg: f64,
    pub predictor_evals: u64,
    pub full_head_projections: u64,
    /// Fraction of tokens whose oracle exit layer lies in the online
    /// neighbourhood of the previous exits (tokens with an empty
    /// neighbourhood are skipped).
    pub context_hit_rate: Option<f64>,
    /// Expected hit rate of a same-sized layer set placed uniformly.
    pub context_base_rate: Option<f64>,
    pub context_ratio: Option<f64>,
    pub per_layer: Vec<LayerStats>,
}

/// Metrics for a single stream.
pub fn compute_metrics(
    name: &str,
    records: &[ExitRecord],
    reference: &[Vec<usize>],
    num_layers: usize,
    online: ScheduleConfig,
) -> Result<DatasetReport> {
    let mut t = Tally::new(num_layers, online);
    t.add(records, reference)?;
    t.report(name)
}

/// Aggregate over tree-decoding steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub branching: Vec<usize>,
    pub steps: u64,
    pub committed_tokens: u64,
    /// Draft tokens accepted per step (excluding the correction token).
    pub mean_accepted_len: f64,
    pub avg_exit_layer: f64,
    pub early_exit_steps: u64,
    pub predictor_evals: u64,
    /// Sum over steps of paths x scheduled layers x longest path.
    pub eval_bound: u64,
}

impl TreeSummary {
    pub fn from_steps(branching: &[usize], steps: &[TreeStepResult]) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Empty("tree steps"));
        }
        let n = steps.len() as f64;
        let accepted: usize = steps.iter().map(|s| s.accepted_tokens.len()).sum();
        Ok(Self {
            branching: branching.to_vec(),
            steps: steps.len() as u64,
            committed_tokens: (accepted + steps.len()) as u64,
            mean_accepted_len: accepted as f64 / n,
            avg_exit_layer: steps.iter().map(|s| s.exit_layer as f64).sum::<f64>() / n,
            early_exit_steps: steps.iter().filter(|s| s.exit_path.is_some()).count() as u64,
            predictor_evals: steps.iter().map(|s| s.predictor_evals as u64).sum(),
            eval_bound: steps
                .iter()
                .map(|s| (s.num_paths * s.active_layers.len() * s.max_path_len) as u64)
                .sum(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub num_layers: usize,
    pub k: usize,
    pub schedule: String,
    pub rows: Vec<DatasetReport>,
    pub overall: DatasetReport,
    pub tree: Option<TreeSummary>,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "layers {}  k {}  schedule {}",
            self.num_layers, self.k, self.schedule
        );
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8} {:>8}",
            "dataset", "tokens", "avg_exit", "oracle", "agree", "active", "hit", "base", "ratio"
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                s,
                "{:<10} {:>7} {:>9.3} {:>9.3} {:>9.4} {:>8.2} {:>8} {:>8} {:>8}",
                r.name,
                r.tokens,
                r.avg_exit_layer,
                r.oracle_avg_exit_layer,
                r.agreement,
                r.active_layer_avg,
                opt(r.context_hit_rate),
                opt(r.context_base_rate),
                opt(r.context_ratio)
            );
        }
        let _ = writeln!(
            s,
            "{:<6} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}",
            "layer", "tp", "fp", "tn", "fn", "precision", "recall"
        );
        for l in &self.overall.per_layer {
            let c = l.confusion;
            let _ = writeln!(
                s,
                "{:<6} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}",
                l.layer,
                c.true_pos,
                c.false_pos,
                c.true_neg,
                c.false_neg,
                opt(l.precision),
                opt(l.recall)
            );
        }
        if let Some(t) = &self.tree {
            let _ = writeln!(
                s,
                "tree {:?}: {} steps, accepted {:.3}/step, exit layer {:.3}, {} early, evals {} (bound {})",
                t.branching, t.steps, t.mean_accepted_len, t.avg_exit_layer, t.early_exit_steps, t.predictor_evals, t.eval_bound
            );
        }
        s
    }

    /// One JSON object per dataset row, then the overall row, then the tree summary if any.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        if let Some(t) = &self.tree {
            serde_json::to_writer(&mut out, t)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
