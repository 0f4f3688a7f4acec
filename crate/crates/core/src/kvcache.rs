//! Fixed-budget per-head KV cache with counter-based eviction.
//!
//! Every attention step produces a row of low-score flags: entry `i` is
//! flagged when its score is strictly below `1 / attendable`, the averaging
//! score at that step. When an append pushes occupancy past the budget `B`,
//! the cache sums each entry's flags over the last `w` rows and evicts the `m`
//! entries with the largest counts. The `r` most recent entries are never
//! evicted; ties go to the oldest position.
//!
//! Attention over the cache renormalizes softmax over whatever survived.

use std::collections::VecDeque;

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{dot, Vector};
use crate::quant::{self, QuantizedBlock, QuantizedEntry};

pub const DEFAULT_RECENT_WINDOW: usize = 10;
pub const DEFAULT_HISTORY_WINDOW: usize = 400;

/// How low-score flags reach the eviction counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterMode {
    /// Flags are recorded at every attention step.
    #[default]
    Maintained,
    /// Queries are stored and re-scored against the cache at compress time.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    /// `B`: maximum number of entries held.
    pub budget: usize,
    /// `r`: most recent entries exempt from eviction.
    pub recent_window: usize,
    /// `w`: number of flag rows feeding the counters.
    pub history_window: usize,
    /// `m`: entries evicted per compression.
    pub drop_amount: usize,
    #[serde(default)]
    pub counter_mode: CounterMode,
    /// Group size for 4-bit storage; `None` stores full precision.
    #[serde(default)]
    pub quant_group: Option<usize>,
}

impl CacheConfig {
    /// Defaults for a budget: `m = ceil(B/2)`, `r = min(10, B − m)`, `w = 400`.
    pub fn with_budget(budget: usize) -> Self {
        let drop_amount = budget.div_ceil(2).max(1);
        Self {
            budget,
            recent_window: DEFAULT_RECENT_WINDOW.min(budget.saturating_sub(drop_amount)),
            history_window: DEFAULT_HISTORY_WINDOW,
            drop_amount,
            counter_mode: CounterMode::Maintained,
            quant_group: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.budget >= 1, "cache budget must be at least 1");
        ensure!(self.drop_amount >= 1, "drop amount must be at least 1");
        ensure!(
            self.recent_window + self.drop_amount <= self.budget,
            "recent window ({}) + drop amount ({}) exceeds budget ({})",
            self.recent_window,
            self.drop_amount,
            self.budget
        );
        if let Some(g) = self.quant_group {
            ensure!(g >= 1, "quantization group size must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub position: usize,
    pub key: Vector,
    pub value: Vector,
}

#[derive(Debug, Clone)]
enum Payload {
    Full(Vector),
    Quantized(Vec<QuantizedBlock>),
}

impl Payload {
    fn store(v: Vector, group: Option<usize>) -> Result<Self> {
        Ok(match group {
            None => Payload::Full(v),
            Some(g) => Payload::Quantized(quant::quantize_group(&v, g)?),
        })
    }

    fn read(&self) -> Vector {
        match self {
            Payload::Full(v) => v.clone(),
            Payload::Quantized(b) => {
                quant::dequantize(b).expect("codes produced by quantize_group")
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Stored {
    position: usize,
    key: Payload,
    value: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlagRow {
    pub step: usize,
    pub flags: BitVec,
}

/// The last `w` flag rows. Row `k` covers the first `flags.len()` cache
/// entries, which are exactly the entries present when it was recorded.
#[derive(Debug, Clone)]
pub struct FlagHistory {
    window: usize,
    rows: VecDeque<FlagRow>,
}

impl FlagHistory {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            rows: VecDeque::with_capacity(window.min(1024)),
        }
    }

    pub fn push(&mut self, row: FlagRow) {
        if self.window == 0 {
            return;
        }
        if self.rows.len() == self.window {
            self.rows.pop_front();
        }
        self.rows.push_back(row);
    }

    pub fn rows(&self) -> impl Iterator<Item = &FlagRow> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Per-entry count of set flags over all retained rows.
    pub fn counters(&self, occupancy: usize) -> Vec<u32> {
        let mut c = vec![0u32; occupancy];
        for row in &self.rows {
            for i in row.flags.iter_ones() {
                c[i] += 1;
            }
        }
        c
    }

    /// Drop the columns of evicted entries from every row.
    fn retain_columns(&mut self, keep: &BitSlice) {
        for row in &mut self.rows {
            let kept: BitVec = row
                .flags
                .iter()
                .by_vals()
                .zip(keep.iter().by_vals())
                .filter_map(|(f, k)| k.then_some(f))
                .collect();
            row.flags = kept;
        }
    }
}

/// A query kept for replaying its scores at compress time.
#[derive(Debug, Clone)]
struct QueryRecord {
    query: Vector,
    scale: f64,
    attendable: usize,
    max_logit: f64,
    sum_exp: f64,
    /// Entries with position below this were in the softmax.
    horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub output: Vector,
    /// Aligned with the cache's entry order.
    pub scores: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eviction {
    pub position: usize,
    pub counter: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompressOutcome {
    /// Evicted entries in ascending position order.
    pub evicted: Vec<Eviction>,
    /// Fewer than `m` entries were eligible; all of them were evicted.
    pub partial: bool,
}

impl CompressOutcome {
    pub fn positions(&self) -> Vec<usize> {
        self.evicted.iter().map(|e| e.position).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BudgetedKvCache {
    config: CacheConfig,
    head_dim: usize,
    entries: Vec<Stored>,
    flags: FlagHistory,
    queries: VecDeque<QueryRecord>,
    steps_seen: usize,
}

impl BudgetedKvCache {
    pub fn new(config: CacheConfig, head_dim: usize) -> Result<Self> {
        config.validate()?;
        ensure!(head_dim >= 1, "head dimension must be at least 1");
        let flags = FlagHistory::new(config.history_window);
        Ok(Self {
            config,
            head_dim,
            entries: Vec::new(),
            flags,
            queries: VecDeque::new(),
            steps_seen: 0,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn occupancy(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn steps_seen(&self) -> usize {
        self.steps_seen
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    /// Entries as read back from storage (dequantized in quantized mode).
    pub fn entries(&self) -> Vec<CacheEntry> {
        self.entries
            .iter()
            .map(|e| CacheEntry {
                position: e.position,
                key: e.key.read(),
                value: e.value.read(),
            })
            .collect()
    }

    pub fn flag_history(&self) -> &FlagHistory {
        &self.flags
    }

    /// The counter mode is fixed at construction; any change is rejected.
    pub fn set_counter_mode(&mut self, mode: CounterMode) -> Result<()> {
        ensure!(
            mode == self.config.counter_mode,
            "counter mode is fixed at construction"
        );
        Ok(())
    }

    /// Quantized storage is fixed at construction; any change is rejected.
    pub fn set_quantization(&mut self, group: Option<usize>) -> Result<()> {
        ensure!(
            group == self.config.quant_group,
            "quantization mode is fixed at construction"
        );
        Ok(())
    }

    /// Append a token; compresses when occupancy exceeds the budget.
    pub fn append(
        &mut self,
        key: Vector,
        value: Vector,
        position: usize,
    ) -> Result<Option<CompressOutcome>> {
        ensure!(
            key.len() == self.head_dim && value.len() == self.head_dim,
            "key/value length must equal head dimension {}",
            self.head_dim
        );
        if let Some(last) = self.entries.last() {
            ensure!(
                position > last.position,
                "position {position} not after last stored position {}",
                last.position
            );
        }
        let group = self.config.quant_group;
        self.entries.push(Stored {
            position,
            key: Payload::store(key, group)?,
            value: Payload::store(value, group)?,
        });
        if self.entries.len() > self.config.budget {
            return Ok(Some(self.compress()));
        }
        Ok(None)
    }

    /// Softmax of `scale · ⟨query, key_i⟩` over cached entries and the
    /// score-weighted sum of their values.
    pub fn estimate_attention(&self, query: &Vector, scale: f64) -> Result<Attention> {
        self.estimate_inner(query, scale).map(|(a, _, _)| a)
    }

    fn estimate_inner(&self, query: &Vector, scale: f64) -> Result<(Attention, f64, f64)> {
        ensure!(!self.entries.is_empty(), "attention over an empty cache");
        ensure!(
            query.len() == self.head_dim,
            "query length {} != head dimension {}",
            query.len(),
            self.head_dim
        );
        let stored: Vec<(Vector, Vector)> = self
            .entries
            .iter()
            .map(|e| (e.key.read(), e.value.read()))
            .collect();
        let logits: Vec<f64> = stored.iter().map(|(k, _)| scale * dot(query, k)).collect();
        ensure!(
            logits.iter().all(|l| l.is_finite()),
            "non-finite attention logit"
        );
        let max_logit = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max_logit).exp()).collect();
        let sum_exp: f64 = exps.iter().sum();
        let scores: Vec<f64> = exps.iter().map(|e| e / sum_exp).collect();
        let mut output = vec![0.0; self.head_dim];
        for (s, (_, v)) in scores.iter().zip(&stored) {
            for (o, x) in output.iter_mut().zip(v.iter()) {
                *o += s * x;
            }
        }
        Ok((
            Attention {
                output: Vector::new(output)?,
                scores: Vector::new(scores)?,
            },
            max_logit,
            sum_exp,
        ))
    }

    /// Attend and feed the importance record according to the counter mode.
    pub fn attend(&mut self, query: &Vector, scale: f64, attendable: usize) -> Result<Attention> {
        let (att, max_logit, sum_exp) = self.estimate_inner(query, scale)?;
        match self.config.counter_mode {
            CounterMode::Maintained => self.push_flags(&att.scores, attendable)?,
            CounterMode::Replay => {
                ensure!(attendable >= 1, "attendable count must be at least 1");
                self.steps_seen += 1;
                if self.config.history_window > 0 {
                    if self.queries.len() == self.config.history_window {
                        self.queries.pop_front();
                    }
                    self.queries.push_back(QueryRecord {
                        query: query.clone(),
                        scale,
                        attendable,
                        max_logit,
                        sum_exp,
                        horizon: self.entries.last().map_or(0, |e| e.position + 1),
                    });
                }
            }
        }
        Ok(att)
    }

    /// Push a flag row: entry `i` is flagged iff `scores[i] < 1/attendable`.
    pub fn record_scores(&mut self, scores: &[f64], attendable: usize) -> Result<()> {
        ensure!(
            self.config.counter_mode == CounterMode::Maintained,
            "record_scores requires the maintained counter mode"
        );
        self.push_flags(scores, attendable)
    }

    fn push_flags(&mut self, scores: &[f64], attendable: usize) -> Result<()> {
        ensure!(
            scores.len() == self.entries.len(),
            "score row length {} != occupancy {}",
            scores.len(),
            self.entries.len()
        );
        ensure!(attendable >= 1, "attendable count must be at least 1");
        let total: f64 = scores.iter().sum();
        ensure!(
            (total - 1.0).abs() <= 1e-9,
            "scores sum to {total}, expected 1"
        );
        let threshold = 1.0 / attendable as f64;
        let flags: BitVec = scores.iter().map(|&s| s < threshold).collect();
        self.steps_seen += 1;
        self.flags.push(FlagRow {
            step: self.steps_seen,
            flags,
        });
        Ok(())
    }

    /// Current eviction counters, aligned with entry order.
    pub fn counters(&self) -> Vec<u32> {
        match self.config.counter_mode {
            CounterMode::Maintained => self.flags.counters(self.entries.len()),
            CounterMode::Replay => self.replayed_counters(),
        }
    }

    fn replayed_counters(&self) -> Vec<u32> {
        let keys: Vec<Vector> = self.entries.iter().map(|e| e.key.read()).collect();
        let mut c = vec![0u32; self.entries.len()];
        for q in &self.queries {
            let threshold = 1.0 / q.attendable as f64;
            for (i, (e, k)) in self.entries.iter().zip(&keys).enumerate() {
                if e.position >= q.horizon {
                    break;
                }
                let score = (q.scale * dot(&q.query, k) - q.max_logit).exp() / q.sum_exp;
                if score < threshold {
                    c[i] += 1;
                }
            }
        }
        c
    }

    /// Evict `m` entries using the configured drop amount.
    pub fn compress(&mut self) -> CompressOutcome {
        self.compress_by(self.config.drop_amount)
    }

    /// Evict up to `drop` non-exempt entries with the largest counters.
    pub fn compress_by(&mut self, drop: usize) -> CompressOutcome {
        if drop == 0 {
            return CompressOutcome::default();
        }
        let n = self.entries.len();
        let eligible = n.saturating_sub(self.config.recent_window);
        let counters = self.counters();
        let mut order: Vec<usize> = (0..eligible).collect();
        // Largest counter first; equal counters evict the oldest position.
        order.sort_by(|&a, &b| {
            counters[b]
                .cmp(&counters[a])
                .then(self.entries[a].position.cmp(&self.entries[b].position))
        });
        order.truncate(drop);
        order.sort_unstable();

        let mut keep = bitvec![1; n];
        for &i in &order {
            keep.set(i, false);
        }
        let evicted = order
            .iter()
            .map(|&i| Eviction {
                position: self.entries[i].position,
                counter: counters[i],
            })
            .collect();
        let mut idx = 0;
        self.entries.retain(|_| {
            let k = keep[idx];
            idx += 1;
            k
        });
        self.flags.retain_columns(&keep);
        CompressOutcome {
            evicted,
            partial: eligible < drop,
        }
    }

    /// Quantized payloads, for dumping. `None` in full-precision mode.
    pub fn quantized_entries(&self) -> Option<Vec<QuantizedEntry>> {
        self.entries
            .iter()
            .map(|e| match (&e.key, &e.value) {
                (Payload::Quantized(k), Payload::Quantized(v)) => Some(QuantizedEntry {
                    position: e.position,
                    key: k.clone(),
                    value: v.clone(),
                }),
                _ => None,
            })
            .collect()
    }
}
