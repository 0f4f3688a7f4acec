use std::fs::File;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use super::{parse_serde, toy_setup, Output};
use crate::analysis::{persistence_report, PersistenceReport};
use crate::error::Result;
use crate::parallel::Execution;
use crate::theory::{planted_persistence_experiment, PlantedComparison, PlantedExperiment};
use crate::toymodel::{generate_reference, PromptKind, ScaleMode, WeightInit};
use crate::trace::AttentionTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersistenceConfig {
    /// Trace CSV to analyse instead of a fresh toy run.
    pub trace: Option<PathBuf>,
    pub seed: u64,
    pub d: usize,
    pub hidden: usize,
    pub prompt_len: usize,
    pub steps: usize,
    pub scale_mode: ScaleMode,
    /// Split point; defaults to half the sequence length.
    pub split: Option<usize>,
    pub length: Option<usize>,
    /// Also run the planted-versus-random comparison.
    pub planted: bool,
    pub planted_experiment: PlantedExperiment,
}

impl Default for PersistenceConfig {
    fn default() -> Self {
        Self {
            trace: None,
            seed: 42,
            d: 16,
            hidden: 32,
            prompt_len: 16,
            steps: 240,
            scale_mode: ScaleMode::InverseStep,
            split: None,
            length: None,
            planted: false,
            planted_experiment: PlantedExperiment::default(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PersistenceFlags {
    #[arg(long)]
    trace: Option<PathBuf>,
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
    #[arg(long, value_parser = parse_serde::<ScaleMode>)]
    scale_mode: Option<ScaleMode>,
    #[arg(long)]
    split: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    planted: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceSummary {
    pub source: String,
    pub report: PersistenceReport,
    pub planted: Option<PlantedComparison>,
}

pub fn summarize(cfg: &PersistenceConfig, exec: Execution) -> Result<PersistenceSummary> {
    let (trace, source) = match &cfg.trace {
        Some(path) => (
            AttentionTrace::read_csv(File::open(path)?)?,
            path.display().to_string(),
        ),
        None => {
            let (weights, prompt) = toy_setup(
                cfg.seed,
                cfg.d,
                cfg.hidden,
                &WeightInit::default(),
                cfg.prompt_len,
                PromptKind::Random,
            )?;
            let run = generate_reference(&weights, &prompt, cfg.steps, cfg.scale_mode)?;
            (run.trace, "toy".to_owned())
        }
    };
    let report = persistence_report(&trace, cfg.split, cfg.length)?;
    let planted = if cfg.planted {
        Some(planted_persistence_experiment(
            &cfg.planted_experiment,
            exec,
        )?)
    } else {
        None
    };
    Ok(PersistenceSummary {
        source,
        report,
        planted,
    })
}

pub(super) fn run(cfg: &PersistenceConfig, mut out: Output) -> Result<()> {
    let summary = summarize(cfg, Execution::preferred())?;
    if out.wants_csv() {
        let mut w = out.csv("persistence.csv")?;
        w.write_record([
            "layer",
            "head",
            "split",
            "length",
            "ratio",
            "pivotal_fraction",
            "degenerate",
        ])?;
        for e in &summary.report.entries {
            w.serialize((
                e.layer,
                e.head,
                e.split,
                e.length,
                e.ratio,
                e.pivotal_fraction,
                e.degenerate,
            ))?;
        }
        w.flush()?;
        if let Some(p) = &summary.planted {
            let mut w = out.csv("persistence_planted.csv")?;
            w.write_record(["seed", "planted_ratio", "random_ratio"])?;
            for s in &p.per_seed {
                w.serialize((s.seed, s.planted, s.random))?;
            }
            w.flush()?;
        }
    }
    out.finish(&summary)
}
