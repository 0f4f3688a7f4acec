//! Diagnostics over attention traces: pivotal tokens, persistence of
//! importance, change ratios and MLP input/output similarity.
//!
//! A key is pivotal for a query when its score is strictly greater than
//! `1/n`, where `n` is the length of that query's score row.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{cosine_similarity, Rng};
use crate::toymodel::ToyModelWeights;
use crate::trace::AttentionTrace;

/// Pairs whose reference score is below this are skipped by [`change_ratio`].
pub const MIN_REFERENCE_SCORE: f64 = 1e-300;

/// `true` at key `j` iff `α_j > 1/len(row)`.
pub fn discretize_row(row: &[f64]) -> Vec<bool> {
    let threshold = 1.0 / row.len() as f64;
    row.iter().map(|&a| a > threshold).collect()
}

pub fn discretize_map(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    query_pos: usize,
) -> Result<Vec<bool>> {
    Ok(discretize_row(trace.row(layer, head, query_pos)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PivotalSet {
    pub positions: BTreeSet<usize>,
    /// Inclusive range of query positions.
    pub source_range: (usize, usize),
    pub threshold_rule: String,
}

/// Union of the pivotal sets of every recorded query in `a..=b`.
pub fn pivotal_union(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    a: usize,
    b: usize,
) -> Result<PivotalSet> {
    let rows = trace.rows(layer, head)?;
    let last = rows.last().map(|r| r.query_pos);
    ensure!(a <= b, "empty query range {a}..={b}");
    ensure!(
        last.is_some_and(|l| b <= l),
        "query range end {b} beyond last recorded query {last:?}"
    );
    let positions = rows
        .iter()
        .filter(|r| (a..=b).contains(&r.query_pos))
        .flat_map(|r| {
            discretize_row(&r.scores)
                .into_iter()
                .enumerate()
                .filter_map(|(j, hot)| hot.then_some(j))
        })
        .collect();
    Ok(PivotalSet {
        positions,
        source_range: (a, b),
        threshold_rule: "score > 1/attendable at each query".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceEntry {
    pub layer: usize,
    pub head: usize,
    /// Split point: queries and keys at positions `< split` form the first half.
    pub split: usize,
    /// Sequence length: the second half covers queries `split..length`.
    pub length: usize,
    pub ratio: f64,
    /// No second-half pivotal token fell in the first half; ratio reported as 1.
    pub degenerate: bool,
    /// `|S_first| / split`.
    pub pivotal_fraction: f64,
    pub first_half_pivotal: usize,
    pub second_half_pivotal_in_first: usize,
}

/// Share of second-half pivotal tokens (restricted to first-half positions)
/// that were already pivotal in the first half.
pub fn persistence_ratio(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    split: usize,
    length: usize,
) -> Result<PersistenceEntry> {
    let recorded = trace
        .rows(layer, head)?
        .last()
        .map_or(0, |r| r.query_pos + 1);
    ensure!(split >= 1, "split must be at least 1");
    ensure!(
        split < length,
        "split {split} must be below length {length}"
    );
    ensure!(
        length <= recorded,
        "length {length} exceeds recorded length {recorded}"
    );
    let first = pivotal_union(trace, layer, head, 0, split - 1)?.positions;
    let later: BTreeSet<usize> = pivotal_union(trace, layer, head, split, length - 1)?
        .positions
        .into_iter()
        .filter(|&p| p < split)
        .collect();
    let kept = later.intersection(&first).count();
    let degenerate = later.is_empty();
    Ok(PersistenceEntry {
        layer,
        head,
        split,
        length,
        ratio: if degenerate {
            1.0
        } else {
            kept as f64 / later.len() as f64
        },
        degenerate,
        pivotal_fraction: first.len() as f64 / split as f64,
        first_half_pivotal: first.len(),
        second_half_pivotal_in_first: later.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceReport {
    pub entries: Vec<PersistenceEntry>,
    /// Mean ratio over all entries, degenerate ones included.
    pub mean_ratio: f64,
    /// Mean ratio over non-degenerate entries; `None` if all are degenerate.
    pub mean_ratio_non_degenerate: Option<f64>,
    pub degenerate_count: usize,
}

/// Persistence for every (layer, head). `split` defaults to `length / 2` and
/// `length` to the recorded length.
pub fn persistence_report(
    trace: &AttentionTrace,
    split: Option<usize>,
    length: Option<usize>,
) -> Result<PersistenceReport> {
    let mut entries = Vec::new();
    for layer in 0..trace.layers() {
        for head in 0..trace.heads() {
            let recorded = trace
                .rows(layer, head)?
                .last()
                .map_or(0, |r| r.query_pos + 1);
            let l = length.unwrap_or(recorded);
            entries.push(persistence_ratio(
                trace,
                layer,
                head,
                split.unwrap_or(l / 2),
                l,
            )?);
        }
    }
    ensure!(!entries.is_empty(), "trace has no heads");
    let mean_ratio = entries.iter().map(|e| e.ratio).sum::<f64>() / entries.len() as f64;
    let live: Vec<f64> = entries
        .iter()
        .filter(|e| !e.degenerate)
        .map(|e| e.ratio)
        .collect();
    Ok(PersistenceReport {
        mean_ratio,
        mean_ratio_non_degenerate: (!live.is_empty())
            .then(|| live.iter().sum::<f64>() / live.len() as f64),
        degenerate_count: entries.len() - live.len(),
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangeRatio {
    pub query_pos: usize,
    pub key_pos: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRatios {
    pub pairs: Vec<ChangeRatio>,
    /// Pairs dropped because the reference score was below 1e-300.
    pub skipped: usize,
}

impl ChangeRatios {
    pub fn values(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.ratio).collect()
    }
}

/// `(α_s − α_o) / α_o` for every (query, key) pair of the reference trace.
pub fn change_ratio(
    compressed: &AttentionTrace,
    reference: &AttentionTrace,
    layer: usize,
    head: usize,
) -> Result<ChangeRatios> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for row in reference.rows(layer, head)? {
        let other = compressed.row(layer, head, row.query_pos)?;
        ensure!(
            other.len() == row.scores.len(),
            "row length mismatch at query {}",
            row.query_pos
        );
        for (key_pos, (&ao, &as_)) in row.scores.iter().zip(other).enumerate() {
            if ao < MIN_REFERENCE_SCORE {
                skipped += 1;
                continue;
            }
            pairs.push(ChangeRatio {
                query_pos: row.query_pos,
                key_pos,
                ratio: (as_ - ao) / ao,
            });
        }
    }
    Ok(ChangeRatios { pairs, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
}

/// Equal-width histogram over `[lo, hi]`; values outside are clamped into the
/// end bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<HistogramBin>> {
    ensure!(bins >= 1, "histogram needs at least one bin");
    ensure!(lo < hi, "histogram range must be non-empty");
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_left: lo + i as f64 * width,
            bin_right: lo + (i + 1) as f64 * width,
            count,
        })
        .collect())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpSimilarity {
    pub mean_cosine: f64,
    /// Mean of `‖x‖ / ‖W_2 relu(W_1 x)‖`; `+∞` when the branch is zero.
    /// Serialized to JSON as `null` in that case.
    pub mean_norm_ratio: f64,
}

/// Average `cos(x, F(x))` and skip-to-branch norm ratio over random unit `x`.
pub fn mlp_io_similarity(
    weights: &ToyModelWeights,
    samples: usize,
    rng: &mut Rng,
) -> Result<MlpSimilarity> {
    weights.validate()?;
    ensure!(samples >= 1, "at least one sample required");
    let (mut cos, mut ratio) = (0.0, 0.0);
    for _ in 0..samples {
        let x = rng.unit_vector(weights.d());
        cos += cosine_similarity(&x, &weights.mlp(&x)?)?;
        let branch = weights.mlp_branch(&x)?.norm();
        ratio += if branch == 0.0 {
            f64::INFINITY
        } else {
            x.norm() / branch
        };
    }
    Ok(MlpSimilarity {
        mean_cosine: cos / samples as f64,
        mean_norm_ratio: ratio / samples as f64,
    })
}
