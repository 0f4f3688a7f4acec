use clap::Args;
use serde::{Deserialize, Serialize};

use super::Output;
use crate::error::{ensure, Error, Result};
use crate::planner::{
    allocate_budget, plan, AllocationStrategy, BudgetAllocation, DeploymentSpec, PlanReport,
};
use crate::quant::bytes_per_element;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    /// Named deployment used when `spec` is absent.
    pub preset: String,
    pub spec: Option<DeploymentSpec>,
    pub batch: Option<u64>,
    pub seq_len: Option<u64>,
    pub reserved_bytes: Option<u64>,
    pub device_memory_bytes: Option<u64>,
    /// Store the KV cache in 4-bit groups of this size.
    pub quant_group: Option<usize>,
    /// Per-head token budgets are emitted when a total is given.
    pub total_budget: Option<usize>,
    pub heads: usize,
    /// Later layers get `1 + slope · l/(L−1)` shares; 0 splits evenly.
    pub slope: f64,
    pub floor_per_head: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            preset: "llama-65b".into(),
            spec: None,
            batch: None,
            seq_len: None,
            reserved_bytes: None,
            device_memory_bytes: None,
            quant_group: None,
            total_budget: None,
            heads: 1,
            slope: 1.0,
            floor_per_head: 0,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PlanFlags {
    /// opt-175b | llama-65b | bloom-176b
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    batch: Option<u64>,
    #[arg(long)]
    seq_len: Option<u64>,
    #[arg(long)]
    reserved_bytes: Option<u64>,
    #[arg(long)]
    device_memory_bytes: Option<u64>,
    #[arg(long)]
    quant_group: Option<usize>,
    #[arg(long)]
    total_budget: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    slope: Option<f64>,
    #[arg(long)]
    floor_per_head: Option<usize>,
}

impl PlanConfig {
    pub fn deployment(&self) -> Result<DeploymentSpec> {
        let mut spec = match &self.spec {
            Some(s) => s.clone(),
            None => DeploymentSpec::presets()
                .into_iter()
                .find(|(n, _)| *n == self.preset)
                .map(|(_, s)| s)
                .ok_or_else(|| Error::Contract(format!("unknown preset {:?}", self.preset)))?,
        };
        if let Some(b) = self.batch {
            spec.batch = b;
        }
        if let Some(s) = self.seq_len {
            spec.seq_len = s;
        }
        if let Some(r) = self.reserved_bytes {
            spec.reserved_bytes = r;
        }
        if let Some(m) = self.device_memory_bytes {
            spec.device_memory_bytes = m;
        }
        if let Some(g) = self.quant_group {
            // Weights keep their own footprint; only the cache is narrowed.
            let weights = spec.weight_bytes();
            ensure!(g >= 1, "quantization group size must be positive");
            spec.bytes_per_element = bytes_per_element(g);
            spec.weight_bytes_override = Some(weights);
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub report: PlanReport,
    pub allocation: Option<BudgetAllocation>,
}

pub fn summarize(cfg: &PlanConfig) -> Result<PlanSummary> {
    let spec = cfg.deployment()?;
    let report = plan(&spec)?;
    let allocation = cfg
        .total_budget
        .map(|total| {
            allocate_budget(
                total,
                spec.layers as usize,
                cfg.heads,
                AllocationStrategy::Ramp { slope: cfg.slope },
                cfg.floor_per_head,
            )
        })
        .transpose()?;
    Ok(PlanSummary { report, allocation })
}

pub(super) fn run(cfg: &PlanConfig, mut out: Output) -> Result<()> {
    let summary = summarize(cfg)?;
    if let (Some(a), true) = (&summary.allocation, out.wants_csv()) {
        let mut w = out.csv("plan_allocation.csv")?;
        w.write_record(["layer", "head", "budget"])?;
        for l in 0..a.layers {
            for h in 0..a.heads {
                w.serialize((l, h, a.get(l, h)))?;
            }
        }
        w.flush()?;
    }
    out.finish(&summary)
}
