use clap::Args;
use serde::{Deserialize, Serialize};

use super::{parse_serde, toy_setup, Output};
use crate::error::{ensure, Result};
use crate::kvcache::CacheConfig;
use crate::numerics::Rng;
use crate::parallel::{map_slice, Execution};
use crate::quant::DEFAULT_GROUP_SIZE;
use crate::toymodel::{
    divergence, generate_compressed, generate_reference, synthetic_prompt, PromptKind, ScaleMode,
    ToyModelWeights, WeightInit,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsKind {
    #[default]
    Gaussian,
    /// Identity projections and no MLP.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantEvalConfig {
    pub seeds: Vec<u64>,
    pub d: usize,
    pub hidden: usize,
    pub prompt_len: usize,
    pub steps: usize,
    pub budget: usize,
    pub group_size: usize,
    pub scale_mode: ScaleMode,
    pub prompt_kind: PromptKind,
    pub weights: WeightsKind,
    /// Rows whose top-two score gap is below this fraction of the top score
    /// are counted as near ties.
    pub near_tie_gap: f64,
}

impl Default for QuantEvalConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            d: 8,
            hidden: 16,
            prompt_len: 8,
            steps: 128,
            budget: 64,
            group_size: DEFAULT_GROUP_SIZE,
            scale_mode: ScaleMode::InverseStep,
            prompt_kind: PromptKind::Random,
            weights: WeightsKind::Gaussian,
            near_tie_gap: 0.05,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct QuantEvalFlags {
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long, value_parser = parse_serde::<ScaleMode>)]
    scale_mode: Option<ScaleMode>,
    #[arg(long, value_parser = parse_serde::<PromptKind>)]
    prompt_kind: Option<PromptKind>,
    /// gaussian | identity
    #[arg(long, value_parser = parse_serde::<WeightsKind>)]
    weights: Option<WeightsKind>,
    #[arg(long)]
    near_tie_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedQuantStats {
    pub seed: u64,
    pub rows: usize,
    pub argmax_agreements: usize,
    pub near_tie_rows: usize,
    /// Largest `|α_quant − α_full|` over all paired rows.
    pub max_score_deviation: f64,
    pub max_divergence_compressed: f64,
    pub max_divergence_quantized: f64,
    /// Largest `|div_quant − div_compressed|` over steps.
    pub max_abs_delta: f64,
    pub mean_delta: f64,
    /// Per-step `(divergence compressed, divergence quantized)` against the
    /// full-cache reference.
    #[serde(skip)]
    pub per_step: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantEvalSummary {
    /// Share of attention rows whose argmax key matches between the
    /// compressed and compressed-plus-quantized runs.
    pub agreement_rate: f64,
    pub rows: usize,
    /// Share of rows that are near ties in the full-precision run.
    pub near_tie_share: f64,
    pub max_score_deviation: f64,
    pub max_abs_delta: f64,
    pub mean_delta: f64,
    pub per_seed: Vec<SeedQuantStats>,
}

/// Index of the first maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn near_tie(row: &[f64], gap: f64) -> bool {
    let mut top = [f64::NEG_INFINITY; 2];
    for &v in row {
        if v > top[0] {
            top = [v, top[0]];
        } else if v > top[1] {
            top[1] = v;
        }
    }
    top[1].is_finite() && top[0] - top[1] < gap * top[0]
}

fn seed_stats(cfg: &QuantEvalConfig, seed: u64) -> Result<SeedQuantStats> {
    let (weights, prompt) = match cfg.weights {
        WeightsKind::Gaussian => toy_setup(
            seed,
            cfg.d,
            cfg.hidden,
            &WeightInit::default(),
            cfg.prompt_len,
            cfg.prompt_kind,
        )?,
        WeightsKind::Identity => (
            ToyModelWeights::identity(cfg.d, true),
            synthetic_prompt(
                cfg.d,
                cfg.prompt_len,
                cfg.prompt_kind,
                None,
                &mut Rng::new(seed),
            )?,
        ),
    };
    let plain = CacheConfig::with_budget(cfg.budget);
    let quant = CacheConfig {
        quant_group: Some(cfg.group_size),
        ..plain.clone()
    };
    let reference = generate_reference(&weights, &prompt, cfg.steps, cfg.scale_mode)?;
    let a = generate_compressed(&weights, &prompt, cfg.steps, &plain, cfg.scale_mode)?;
    let b = generate_compressed(&weights, &prompt, cfg.steps, &quant, cfg.scale_mode)?;
    let (ra, rb) = (a.trace.rows(0, 0)?, b.trace.rows(0, 0)?);
    let mut agreements = 0;
    let mut near_ties = 0;
    let mut max_dev = 0.0f64;
    for (x, y) in ra.iter().zip(rb) {
        if argmax(&x.scores) == argmax(&y.scores) {
            agreements += 1;
        }
        if near_tie(&x.scores, cfg.near_tie_gap) {
            near_ties += 1;
        }
        for (p, q) in x.scores.iter().zip(&y.scores) {
            max_dev = max_dev.max((p - q).abs());
        }
    }
    let dc = divergence(&reference, &a)?;
    let dq = divergence(&reference, &b)?;
    let deltas: Vec<f64> = dq.iter().zip(&dc).map(|(q, c)| q - c).collect();
    Ok(SeedQuantStats {
        seed,
        rows: ra.len(),
        argmax_agreements: agreements,
        near_tie_rows: near_ties,
        max_score_deviation: max_dev,
        max_divergence_compressed: dc.iter().copied().fold(0.0, f64::max),
        max_divergence_quantized: dq.iter().copied().fold(0.0, f64::max),
        max_abs_delta: deltas.iter().fold(0.0, |m, d| m.max(d.abs())),
        mean_delta: deltas.iter().sum::<f64>() / deltas.len().max(1) as f64,
        per_step: dc.into_iter().zip(dq).collect(),
    })
}

pub fn summarize(cfg: &QuantEvalConfig, exec: Execution) -> Result<QuantEvalSummary> {
    ensure!(!cfg.seeds.is_empty(), "at least one seed required");
    ensure!(cfg.steps >= 1, "at least one step required");
    let per_seed = map_slice(exec, &cfg.seeds, |&s| seed_stats(cfg, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let rows: usize = per_seed.iter().map(|s| s.rows).sum();
    let agreements: usize = per_seed.iter().map(|s| s.argmax_agreements).sum();
    let ties: usize = per_seed.iter().map(|s| s.near_tie_rows).sum();
    let n = per_seed.len() as f64;
    Ok(QuantEvalSummary {
        agreement_rate: agreements as f64 / rows as f64,
        rows,
        near_tie_share: ties as f64 / rows as f64,
        max_score_deviation: per_seed
            .iter()
            .map(|s| s.max_score_deviation)
            .fold(0.0, f64::max),
        max_abs_delta: per_seed.iter().map(|s| s.max_abs_delta).fold(0.0, f64::max),
        mean_delta: per_seed.iter().map(|s| s.mean_delta).sum::<f64>() / n,
        per_seed,
    })
}

pub(super) fn run(cfg: &QuantEvalConfig, mut out: Output) -> Result<()> {
    let summary = summarize(cfg, Execution::preferred())?;
    if out.wants_csv() {
        let mut w = out.csv("quant_eval.csv")?;
        w.write_record([
            "seed",
            "step",
            "divergence_compressed",
            "divergence_quantized",
            "delta",
        ])?;
        for s in &summary.per_seed {
            for (i, (c, q)) in s.per_step.iter().enumerate() {
                w.serialize((s.seed, i + 1, c, q, q - c))?;
            }
        }
        w.flush()?;
    }
    out.finish(&summary)
}
