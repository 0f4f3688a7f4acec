//! Multi-layer, multi-head generalization with one cache per (layer, head).
//!
//! Each layer applies causal multi-head attention (the current token attends
//! to itself and everything before it, logit scale `1/√d_h`), a residual add,
//! then the MLP `F`. The final layer output is the next token.

use serde::{Deserialize, Serialize};

use super::{EvictionRecord, GenerationRun};
use crate::error::{ensure, Result};
use crate::kvcache::{
    BudgetedKvCache, CacheConfig, CompressOutcome, CounterMode, DEFAULT_HISTORY_WINDOW,
    DEFAULT_RECENT_WINDOW,
};
use crate::numerics::{dot, softmax, Matrix, Rng, Vector};
use crate::trace::AttentionTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// d×d each; head `h` uses columns `h·d_h .. (h+1)·d_h`.
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// hidden×d
    pub w_1: Matrix,
    /// d×hidden
    pub w_2: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadToyConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub normalize_outputs: bool,
    pub weights: Vec<LayerWeights>,
}

impl MultiHeadToyConfig {
    pub fn gaussian(
        layers: usize,
        heads: usize,
        head_dim: usize,
        hidden: usize,
        mlp_gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let d = heads * head_dim;
        let s = 1.0 / (d as f64).sqrt();
        let weights = (0..layers)
            .map(|_| LayerWeights {
                w_q: Matrix::gaussian(d, d, s, rng),
                w_k: Matrix::gaussian(d, d, s, rng),
                w_v: Matrix::gaussian(d, d, s, rng),
                w_o: Matrix::gaussian(d, d, s, rng),
                w_1: Matrix::gaussian(hidden, d, s, rng),
                w_2: Matrix::gaussian(d, hidden, mlp_gain / (hidden as f64).sqrt(), rng),
            })
            .collect();
        Self {
            layers,
            heads,
            head_dim,
            normalize_outputs: true,
            weights,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.layers >= 1 && self.heads >= 1 && self.head_dim >= 1,
            "layers, heads and head_dim must be positive"
        );
        ensure!(
            self.weights.len() == self.layers,
            "expected {} layer weight sets, found {}",
            self.layers,
            self.weights.len()
        );
        let d = self.model_dim();
        for (l, w) in self.weights.iter().enumerate() {
            for m in [&w.w_q, &w.w_k, &w.w_v, &w.w_o] {
                ensure!(
                    m.rows() == d && m.cols() == d,
                    "layer {l}: projections must be {d}x{d}"
                );
            }
            let h = w.w_1.rows();
            ensure!(
                w.w_1.cols() == d && w.w_2.rows() == d && w.w_2.cols() == h,
                "layer {l}: MLP shapes inconsistent"
            );
        }
        Ok(())
    }
}

/// Per-head cache settings; the budget comes from the allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCacheParams {
    pub recent_window: usize,
    pub history_window: usize,
    /// Fraction of the budget dropped per compression.
    pub drop_ratio: f64,
    pub counter_mode: CounterMode,
    pub quant_group: Option<usize>,
}

impl Default for HeadCacheParams {
    fn default() -> Self {
        Self {
            recent_window: DEFAULT_RECENT_WINDOW,
            history_window: DEFAULT_HISTORY_WINDOW,
            drop_ratio: 0.5,
            counter_mode: CounterMode::Maintained,
            quant_group: None,
        }
    }
}

impl HeadCacheParams {
    /// `r = min(recent_window, B − 1)`, `m = ceil(drop_ratio·B)` clamped to `[1, B − r]`.
    pub fn cache_config(&self, budget: usize) -> Result<CacheConfig> {
        ensure!(budget >= 1, "per-head budget must be at least 1");
        ensure!(
            self.drop_ratio > 0.0 && self.drop_ratio <= 1.0,
            "drop ratio must lie in (0, 1]"
        );
        let recent_window = self.recent_window.min(budget - 1);
        let drop_amount =
            ((self.drop_ratio * budget as f64).ceil() as usize).clamp(1, budget - recent_window);
        Ok(CacheConfig {
            budget,
            recent_window,
            history_window: self.history_window,
            drop_amount,
            counter_mode: self.counter_mode,
            quant_group: self.quant_group,
        })
    }
}

enum HeadStore {
    Full {
        keys: Vec<Vector>,
        values: Vec<Vector>,
    },
    Budgeted(BudgetedKvCache),
}

impl HeadStore {
    fn occupancy(&self) -> usize {
        match self {
            HeadStore::Full { keys, .. } => keys.len(),
            HeadStore::Budgeted(c) => c.occupancy(),
        }
    }

    /// Appends the token at `pos`, attends with `query`, and returns the head
    /// output plus a score row over positions `0..=pos`.
    fn step(
        &mut self,
        key: Vector,
        value: Vector,
        query: &Vector,
        pos: usize,
        scale: f64,
        mut on_evict: impl FnMut(&CompressOutcome),
    ) -> Result<(Vector, Vec<f64>)> {
        match self {
            HeadStore::Full { keys, values } => {
                keys.push(key);
                values.push(value);
                let logits: Vec<f64> = keys.iter().map(|k| scale * dot(query, k)).collect();
                let scores = softmax(&logits)?;
                let mut out = vec![0.0; query.len()];
                for (s, v) in scores.iter().zip(values.iter()) {
                    for (o, x) in out.iter_mut().zip(v.iter()) {
                        *o += s * x;
                    }
                }
                Ok((Vector::new(out)?, scores.into_inner()))
            }
            HeadStore::Budgeted(cache) => {
                if let Some(out) = cache.append(key, value, pos)? {
                    on_evict(&out);
                }
                let att = cache.attend(query, scale, pos + 1)?;
                let mut row = vec![0.0; pos + 1];
                for (p, s) in cache.positions().into_iter().zip(att.scores.iter()) {
                    row[p] = *s;
                }
                Ok((att.output, row))
            }
        }
    }
}

fn run_multihead(
    config: &MultiHeadToyConfig,
    prompt: &[Vector],
    steps: usize,
    mut stores: Vec<HeadStore>,
) -> Result<GenerationRun> {
    config.validate()?;
    let (d, dh, heads) = (config.model_dim(), config.head_dim, config.heads);
    ensure!(
        prompt.iter().all(|x| x.len() == d),
        "prompt tokens must have length {d}"
    );
    ensure!(
        steps == 0 || !prompt.is_empty(),
        "generation needs a non-empty prompt"
    );
    let mut run = GenerationRun {
        seed: None,
        prompt_len: prompt.len(),
        tokens: prompt.to_vec(),
        trace: AttentionTrace::new(config.layers, heads),
        evictions: Vec::new(),
        occupancy: Vec::new(),
        peak_occupancy: vec![0; stores.len()],
    };
    if steps == 0 {
        return Ok(run);
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let n = prompt.len() + steps;
    for q in 0..n - 1 {
        let generating = q + 1 >= prompt.len();
        let step = if generating { q + 2 - prompt.len() } else { 0 };
        let mut h = run.tokens[q].clone();
        let mut evicted: Vec<EvictionRecord> = Vec::new();
        for (layer, w) in config.weights.iter().enumerate() {
            let (qv, kv, vv) = (h.vecmat(&w.w_q)?, h.vecmat(&w.w_k)?, h.vecmat(&w.w_v)?);
            let mut concat = Vec::with_capacity(d);
            for head in 0..heads {
                let span = head * dh..(head + 1) * dh;
                let slot = layer * heads + head;
                let (out, row) = stores[slot].step(
                    Vector::new(kv[span.clone()].to_vec())?,
                    Vector::new(vv[span.clone()].to_vec())?,
                    &Vector::new(qv[span].to_vec())?,
                    q,
                    scale,
                    |o| {
                        evicted.extend(o.evicted.iter().map(|e| EvictionRecord {
                            step,
                            query_pos: q,
                            layer,
                            head,
                            position: e.position,
                            counter: e.counter,
                        }))
                    },
                )?;
                run.peak_occupancy[slot] = run.peak_occupancy[slot].max(stores[slot].occupancy());
                if generating {
                    run.trace.push(layer, head, q, row)?;
                }
                concat.extend_from_slice(&out);
            }
            let attn = Vector::new(concat)?.vecmat(&w.w_o)?;
            let r = h.add(&attn)?;
            let branch = w.w_2.matvec(&w.w_1.matvec(&r)?.relu())?;
            h = r.add(&branch)?;
        }
        run.evictions.extend(evicted);
        if generating {
            let next = if config.normalize_outputs {
                h.normalized()?
            } else {
                h
            };
            run.occupancy
                .push(stores.iter().map(HeadStore::occupancy).max().unwrap_or(0));
            run.tokens.push(next);
        }
    }
    Ok(run)
}

/// Multi-head generation with plain full-history storage.
pub fn generate_multihead_reference(
    config: &MultiHeadToyConfig,
    prompt: &[Vector],
    steps: usize,
) -> Result<GenerationRun> {
    let stores = (0..config.layers * config.heads)
        .map(|_| HeadStore::Full {
            keys: Vec::new(),
            values: Vec::new(),
        })
        .collect();
    run_multihead(config, prompt, steps, stores)
}

/// Multi-head generation with one budgeted cache per (layer, head).
/// `budgets` is layer-major: `budgets[layer * H + head]`.
pub fn generate_multihead(
    config: &MultiHeadToyConfig,
    prompt: &[Vector],
    steps: usize,
    budgets: &[usize],
    params: &HeadCacheParams,
) -> Result<GenerationRun> {
    ensure!(
        budgets.len() == config.layers * config.heads,
        "expected {} per-head budgets, found {}",
        config.layers * config.heads,
        budgets.len()
    );
    let stores = budgets
        .iter()
        .map(|&b| {
            Ok(HeadStore::Budgeted(BudgetedKvCache::new(
                params.cache_config(b)?,
                config.head_dim,
            )?))
        })
        .collect::<Result<Vec<_>>>()?;
    run_multihead(config, prompt, steps, stores)
}
