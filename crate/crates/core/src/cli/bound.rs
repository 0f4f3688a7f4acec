use clap::Args;
use serde::{Deserialize, Serialize};

use super::Output;
use crate::error::{ensure, Result};
use crate::parallel::Execution;
use crate::theory::{monte_carlo_dropped_mass, tail_bound, BoundInputs, PowerLawParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub ks: Vec<f64>,
    /// Budget fractions `B/T`; the budget is `round(fraction · t)`.
    pub fractions: Vec<f64>,
    pub epsilon: f64,
    pub b: f64,
    pub u: f64,
    pub t: usize,
    /// Shortest sequence length; defaults to `t`.
    pub t_min: Option<usize>,
    pub trials: usize,
    pub seed: u64,
    /// Points with a failure probability at or above this are not compared.
    pub max_failure_probability: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            ks: vec![2.5, 3.0, 4.0],
            fractions: vec![0.5, 0.7, 0.9],
            epsilon: 0.05,
            b: 1.0,
            u: 10.0,
            t: 512,
            t_min: None,
            trials: 1000,
            seed: 42,
            max_failure_probability: 0.5,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BoundFlags {
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    u: Option<f64>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    t_min: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_failure_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub k: f64,
    pub fraction: f64,
    pub budget: usize,
    pub bound: f64,
    pub error_bound: f64,
    pub bracket: f64,
    pub vacuous: bool,
    pub failure_probability: f64,
    pub empirical_mean: f64,
    pub empirical_max: f64,
    pub empirical_std_error: f64,
    /// Non-vacuous with failure probability under the configured cap.
    pub compared: bool,
    /// `empirical_mean ≤ bound`, reported for every row.
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub rows: Vec<BoundRow>,
    pub compared_points: usize,
    pub compared_pass: usize,
    /// True when every compared point is within its bound (vacuously so when
    /// none qualify).
    pub pass: bool,
}

pub fn summarize(cfg: &BoundConfig, exec: Execution) -> Result<BoundSummary> {
    ensure!(cfg.t >= 2, "t must be at least 2");
    let mut rows = Vec::new();
    for &k in &cfg.ks {
        let params = PowerLawParams::new(k, cfg.b, cfg.u)?;
        for &fraction in &cfg.fractions {
            ensure!(
                (0.0..=1.0).contains(&fraction),
                "budget fraction {fraction} outside [0, 1]"
            );
            let budget = (fraction * cfg.t as f64).round() as usize;
            let tb = tail_bound(&BoundInputs {
                budget,
                t_min: cfg.t_min.unwrap_or(cfg.t),
                t_max: cfg.t,
                epsilon: cfg.epsilon,
                params,
            })?;
            // t − 1 weights are drawn, so any budget of t − 1 or more keeps all.
            let mc = monte_carlo_dropped_mass(
                &params,
                cfg.t,
                budget.min(cfg.t - 1),
                cfg.trials,
                cfg.seed,
                exec,
            )?;
            rows.push(BoundRow {
                k,
                fraction,
                budget,
                bound: tb.bound,
                error_bound: tb.error_bound,
                bracket: tb.bracket,
                vacuous: tb.vacuous,
                failure_probability: tb.failure_probability,
                empirical_mean: mc.mean,
                empirical_max: mc.max,
                empirical_std_error: mc.std_error,
                compared: !tb.vacuous && tb.failure_probability < cfg.max_failure_probability,
                within_bound: mc.mean <= tb.bound,
            });
        }
    }
    let compared_points = rows.iter().filter(|r| r.compared).count();
    let compared_pass = rows.iter().filter(|r| r.compared && r.within_bound).count();
    Ok(BoundSummary {
        rows,
        compared_points,
        compared_pass,
        pass: compared_pass == compared_points,
    })
}

pub(super) fn run(cfg: &BoundConfig, mut out: Output) -> Result<()> {
    let summary = summarize(cfg, Execution::preferred())?;
    if out.wants_csv() {
        let mut w = out.csv("bound.csv")?;
        for r in &summary.rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    out.finish(&summary)
}
