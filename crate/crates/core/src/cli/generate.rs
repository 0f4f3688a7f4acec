use clap::Args;
use serde::{Deserialize, Serialize};

use super::{parse_serde, toy_setup, Output};
use crate::error::{ensure, Result};
use crate::kvcache::{CacheConfig, CounterMode, DEFAULT_RECENT_WINDOW};
use crate::toymodel::{
    divergence, generate_compressed, generate_reference, PromptKind, ScaleMode, WeightInit,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: u64,
    pub d: usize,
    pub hidden: usize,
    pub prompt_len: usize,
    pub steps: usize,
    /// Absolute cache budget; overrides `budget_ratio`.
    pub budget: Option<usize>,
    /// Budget as a fraction of `prompt_len + steps`, rounded up.
    pub budget_ratio: f64,
    pub recent_window: Option<usize>,
    pub history_window: Option<usize>,
    pub drop_amount: Option<usize>,
    pub counter_mode: CounterMode,
    pub quant_group: Option<usize>,
    pub scale_mode: ScaleMode,
    pub prompt_kind: PromptKind,
    pub projection_gain: f64,
    pub mlp_gain: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            d: 8,
            hidden: 16,
            prompt_len: 8,
            steps: 128,
            budget: None,
            budget_ratio: 0.5,
            recent_window: None,
            history_window: None,
            drop_amount: None,
            counter_mode: CounterMode::Maintained,
            quant_group: None,
            scale_mode: ScaleMode::InverseStep,
            prompt_kind: PromptKind::Random,
            projection_gain: 1.0,
            mlp_gain: 0.1,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateFlags {
    #[arg(long)]
    seed: Option<u64>,
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
    budget_ratio: Option<f64>,
    #[arg(long)]
    recent_window: Option<usize>,
    #[arg(long)]
    history_window: Option<usize>,
    #[arg(long)]
    drop_amount: Option<usize>,
    /// maintained | replay
    #[arg(long, value_parser = parse_serde::<CounterMode>)]
    counter_mode: Option<CounterMode>,
    #[arg(long)]
    quant_group: Option<usize>,
    /// inverse_step | inverse_sqrt_dim
    #[arg(long, value_parser = parse_serde::<ScaleMode>)]
    scale_mode: Option<ScaleMode>,
    /// random | constant
    #[arg(long, value_parser = parse_serde::<PromptKind>)]
    prompt_kind: Option<PromptKind>,
    #[arg(long)]
    projection_gain: Option<f64>,
    #[arg(long)]
    mlp_gain: Option<f64>,
}

impl GenerateConfig {
    pub fn weight_init(&self) -> WeightInit {
        WeightInit {
            projection_gain: self.projection_gain,
            mlp_gain: self.mlp_gain,
            normalize_outputs: true,
        }
    }

    /// Effective cache settings after filling unset fields from the budget.
    pub fn cache_config(&self) -> Result<CacheConfig> {
        let budget = match self.budget {
            Some(b) => b,
            None => {
                ensure!(
                    self.budget_ratio > 0.0 && self.budget_ratio.is_finite(),
                    "budget ratio must be positive"
                );
                (self.budget_ratio * (self.prompt_len + self.steps) as f64).ceil() as usize
            }
        };
        let mut c = CacheConfig::with_budget(budget);
        if let Some(m) = self.drop_amount {
            c.drop_amount = m;
            c.recent_window = DEFAULT_RECENT_WINDOW.min(budget.saturating_sub(m));
        }
        if let Some(r) = self.recent_window {
            c.recent_window = r;
        }
        if let Some(w) = self.history_window {
            c.history_window = w;
        }
        c.counter_mode = self.counter_mode;
        c.quant_group = self.quant_group;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    /// 1-based generation step.
    pub step: usize,
    pub query_pos: usize,
    pub occupancy: usize,
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub cache: CacheConfig,
    pub max_divergence: f64,
    pub mean_divergence: f64,
    pub peak_occupancy: usize,
    pub evictions: usize,
    pub steps: Vec<StepRow>,
}

pub fn summarize(cfg: &GenerateConfig) -> Result<(GenerateSummary, Runs)> {
    let cache = cfg.cache_config()?;
    let (weights, prompt) = toy_setup(
        cfg.seed,
        cfg.d,
        cfg.hidden,
        &cfg.weight_init(),
        cfg.prompt_len,
        cfg.prompt_kind,
    )?;
    let reference = generate_reference(&weights, &prompt, cfg.steps, cfg.scale_mode)?;
    let compressed = generate_compressed(&weights, &prompt, cfg.steps, &cache, cfg.scale_mode)?;
    let div = divergence(&reference, &compressed)?;
    let steps: Vec<StepRow> = div
        .iter()
        .zip(&compressed.occupancy)
        .enumerate()
        .map(|(i, (&divergence, &occupancy))| StepRow {
            step: i + 1,
            query_pos: cfg.prompt_len - 1 + i,
            occupancy,
            divergence,
        })
        .collect();
    let summary = GenerateSummary {
        max_divergence: div.iter().copied().fold(0.0, f64::max),
        mean_divergence: if div.is_empty() {
            0.0
        } else {
            div.iter().sum::<f64>() / div.len() as f64
        },
        peak_occupancy: compressed.peak_occupancy[0],
        evictions: compressed.evictions.len(),
        cache,
        steps,
    };
    Ok((
        summary,
        Runs {
            reference,
            compressed,
        },
    ))
}

pub struct Runs {
    pub reference: crate::toymodel::GenerationRun,
    pub compressed: crate::toymodel::GenerationRun,
}

pub(super) fn run(cfg: &GenerateConfig, mut out: Output) -> Result<()> {
    let (summary, runs) = summarize(cfg)?;
    if out.wants_csv() {
        let mut w = out.csv("generate_steps.csv")?;
        w.write_record(["step", "query_pos", "occupancy", "divergence"])?;
        for r in &summary.steps {
            w.serialize((r.step, r.query_pos, r.occupancy, r.divergence))?;
        }
        w.flush()?;
        let comments = out.header_comments();
        runs.reference
            .trace
            .write_csv(out.raw("trace_reference.csv")?, &comments)?;
        runs.compressed
            .trace
            .write_csv(out.raw("trace_compressed.csv")?, &comments)?;
        let mut w = out.csv("evictions.csv")?;
        w.write_record(["step", "head", "layer", "evicted_position", "counter_value"])?;
        for e in &runs.compressed.evictions {
            w.serialize((e.step, e.head, e.layer, e.position, e.counter))?;
        }
        w.flush()?;
    }
    out.finish(&summary)
}
