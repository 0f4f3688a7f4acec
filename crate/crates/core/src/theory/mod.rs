//! Numerical counterparts of the attention-persistence and budget-bound
//! arguments: an interval checker for the pivotal-token inequality, power-law
//! tail bounds with Monte Carlo validation, and planted-structure experiments.

mod powerlaw;

pub use powerlaw::{
    dropped_share, monte_carlo_dropped_mass, sample_power_law, tail_bound, BoundInputs,
    DroppedMass, PowerLawParams, TailBound,
};

use serde::{Deserialize, Serialize};

use crate::analysis::persistence_report;
use crate::error::{ensure, Result};
use crate::numerics::{largest_singular_value, Matrix, Rng, Vector};
use crate::parallel::{map_indexed, map_slice, Execution};
use crate::toymodel::{
    generate_reference, step_reference, synthetic_prompt, CheckReport, PromptKind, ScaleMode,
    ToyModelWeights, WeightInit,
};

const SINGULAR_TOL: f64 = 1e-13;
/// Absolute slack on each side of the interval check.
pub const INTERVAL_SLACK: f64 = 1e-9;

/// `|x₁·y − x₂·y| ≤ √(2δ)‖y‖` for unit `x₁, x₂` with `δ = 1 − x₁·x₂`.
///
/// Trial `i` draws from stream `i` of `seed`; `δ` is log-uniform over
/// `[1e-6, 2]` and every tenth trial uses `x₂ = x₁`.
pub fn inner_product_deviation_check(
    d: usize,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<CheckReport> {
    ensure!(d >= 2, "dimension must be at least 2");
    ensure!(trials >= 1, "at least one trial required");
    let slacks = map_indexed(exec, trials, |i| -> Result<f64> {
        let mut rng = Rng::derive(seed, i as u64);
        let x1 = rng.unit_vector(d);
        let x2 = if i % 10 == 0 {
            x1.clone()
        } else {
            let target = 10f64.powf(rng.uniform_range(-6.0, 2f64.log10()));
            let cos = 1.0 - target;
            let mut w = rng.unit_vector(d);
            w.axpy(-w.dot(&x1)?, &x1)?;
            let w = w.normalized()?;
            x1.scale(cos)
                .add(&w.scale((1.0 - cos * cos).max(0.0).sqrt()))?
        };
        let y_scale = 10f64.powf(rng.uniform_range(-1.0, 1.0));
        let y = rng.gaussian_vector(d, y_scale);
        let delta = (1.0 - x1.dot(&x2)?).max(0.0);
        let lhs = (x1.dot(&y)? - x2.dot(&y)?).abs();
        Ok((2.0 * delta).sqrt() * y.norm() - lhs)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(CheckReport::from_slacks(&slacks))
}

/// Largest singular values of the four projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionNorms {
    pub q: f64,
    pub k: f64,
    pub v: f64,
    pub o: f64,
}

impl ProjectionNorms {
    pub fn of(weights: &ToyModelWeights) -> Result<Self> {
        Ok(Self {
            q: largest_singular_value(&weights.w_q, SINGULAR_TOL)?,
            k: largest_singular_value(&weights.w_k, SINGULAR_TOL)?,
            v: largest_singular_value(&weights.w_v, SINGULAR_TOL)?,
            o: largest_singular_value(&weights.w_o, SINGULAR_TOL)?,
        })
    }

    pub fn product(&self) -> f64 {
        self.q * self.k * self.v * self.o
    }
}

/// Interval verdict for one qualifying position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalVerdict {
    pub position: usize,
    /// `x_ℓ A x_ℓᵀ`.
    pub self_term: f64,
    /// `max_{j≠ℓ} |x_j A x_ℓᵀ|`.
    pub max_cross: f64,
    pub score: f64,
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotalIntervalReport {
    pub c: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub delta_limit: f64,
    pub delta_ok: bool,
    pub norms: ProjectionNorms,
    pub attention_norm: f64,
    /// Attendable positions meeting the self-term threshold.
    pub above_threshold: usize,
    /// Positions meeting both the threshold and the dominance condition.
    pub qualifying: usize,
    /// Empty unless `delta_ok`.
    pub verdicts: Vec<IntervalVerdict>,
}

impl PivotalIntervalReport {
    pub fn violations(&self) -> usize {
        self.verdicts.iter().filter(|v| !v.holds).count()
    }
}

/// `W_V W_O W_Q W_Kᵀ`.
pub fn interaction_matrix(weights: &ToyModelWeights) -> Result<Matrix> {
    weights
        .w_v
        .matmul(&weights.w_o)?
        .matmul(&weights.w_q)?
        .matmul(&weights.w_k.transpose())
}

/// Checks the pivotal-token interval for the step that consumes `history`
/// (`x_1 .. x_t`, unit norm) and emits `x_{t+1}`.
///
/// With `a_t` the attention output and `δ = 1 − a_t·x_{t+1}/‖a_t‖`, every
/// attendable `ℓ` with `x_ℓAx_ℓᵀ ≥ c` and `|x_jAx_ℓᵀ| ≤ ε·x_ℓAx_ℓᵀ` for all
/// `j ≠ ℓ` must satisfy
/// `(x_ℓAx_ℓᵀ/‖a_t‖)(α_ℓ − 3ε) ≤ x_{t+1}W_QW_Kᵀx_ℓᵀ ≤ (x_ℓAx_ℓᵀ/‖a_t‖)(α_ℓ + 3ε)`
/// provided `δ ≤ (cε/(λ_Qλ_Kλ_Vλ_O))²`.
pub fn check_pivotal_interval(
    weights: &ToyModelWeights,
    history: &[Vector],
    c: f64,
    epsilon: f64,
    scale_mode: ScaleMode,
) -> Result<PivotalIntervalReport> {
    weights.validate()?;
    ensure!(
        weights.normalize_outputs,
        "the check needs unit-norm outputs"
    );
    ensure!(c > 0.0, "c must be positive");
    ensure!(epsilon > 0.0, "epsilon must be positive");
    ensure!(
        history.iter().all(|x| (x.norm() - 1.0).abs() < 1e-9),
        "history tokens must have unit norm"
    );
    let step = step_reference(weights, history, scale_mode)?;
    let a_norm = step.attention.norm();
    ensure!(a_norm > 0.0, "attention output vanished");
    let delta = 1.0 - step.attention.dot(&step.next)? / a_norm;
    let norms = ProjectionNorms::of(weights)?;
    let delta_limit = (c * epsilon / norms.product()).powi(2);
    let delta_ok = delta <= delta_limit;

    let a = interaction_matrix(weights)?;
    let qk = weights.w_q.matmul(&weights.w_k.transpose())?;
    // Column images A x_ℓᵀ for every token.
    let images: Vec<Vector> = history.iter().map(|x| a.matvec(x)).collect::<Result<_>>()?;
    let attendable = history.len() - 1;
    let mut above_threshold = 0;
    let mut verdicts = Vec::new();
    for l in 0..attendable {
        let self_term = history[l].dot(&images[l])?;
        if self_term < c {
            continue;
        }
        above_threshold += 1;
        let mut max_cross = 0.0f64;
        for (j, x) in history.iter().enumerate() {
            if j != l {
                max_cross = max_cross.max(x.dot(&images[l])?.abs());
            }
        }
        if max_cross > epsilon * self_term {
            continue;
        }
        let alpha = step.scores[l];
        let value = step.next.dot(&qk.matvec(&history[l])?)?;
        let lower = self_term / a_norm * (alpha - 3.0 * epsilon);
        let upper = self_term / a_norm * (alpha + 3.0 * epsilon);
        verdicts.push(IntervalVerdict {
            position: l,
            self_term,
            max_cross,
            score: alpha,
            lower,
            value,
            upper,
            holds: value >= lower - INTERVAL_SLACK && value <= upper + INTERVAL_SLACK,
        });
    }
    let qualifying = verdicts.len();
    if !delta_ok {
        verdicts.clear();
    }
    Ok(PivotalIntervalReport {
        c,
        epsilon,
        delta,
        delta_limit,
        delta_ok,
        norms,
        attention_norm: a_norm,
        above_threshold,
        qualifying,
        verdicts,
    })
}

/// Random weights plus a planted direction `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedWeights {
    pub weights: ToyModelWeights,
    /// Unit token-space direction amplified in `A`.
    pub direction: Vector,
    /// Per-factor gain of the rank-1 updates.
    pub gain: f64,
}

/// Gaussian weights from stream 0 of `seed`, then
/// `W_Q += g u zᵀ`, `W_K += g u zᵀ`, `W_V += g u zᵀ`, `W_O += g z uᵀ` with unit
/// `u`, `z` from stream 1, so `A` gains `g⁴ u uᵀ`. The gain is
/// `g = (strength · σ₁(A₀))^{1/4}`, where `A₀` is the unplanted product; at
/// strength 0 the weights equal the plain Gaussian draw.
pub fn planted_weights(
    d: usize,
    init: &WeightInit,
    strength: f64,
    seed: u64,
) -> Result<PlantedWeights> {
    ensure!(
        strength >= 0.0 && strength.is_finite(),
        "planted strength must be >= 0"
    );
    ensure!(d >= 1, "dimension must be positive");
    let mut weights = ToyModelWeights::gaussian(d, d, 2 * d, init, &mut Rng::derive(seed, 0));
    let mut rng = Rng::derive(seed, 1);
    let u = rng.unit_vector(d);
    let z = rng.unit_vector(d);
    let base = largest_singular_value(&interaction_matrix(&weights)?, SINGULAR_TOL)?;
    let gain = (strength * base).powf(0.25);
    if gain > 0.0 {
        weights.w_q.add_outer(gain, &u, &z)?;
        weights.w_k.add_outer(gain, &u, &z)?;
        weights.w_v.add_outer(gain, &u, &z)?;
        weights.w_o.add_outer(gain, &z, &u)?;
    }
    Ok(PlantedWeights {
        weights,
        direction: u,
        gain,
    })
}

/// Settings of the planted-versus-random persistence comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedExperiment {
    pub d: usize,
    /// Total sequence length (prompt plus generated tokens).
    pub length: usize,
    pub prompt_len: usize,
    pub strength: f64,
    pub seeds: Vec<u64>,
    /// Weight of the planted direction added to each prompt token before
    /// normalization.
    pub prompt_bias: f64,
    pub mlp_gain: f64,
    pub scale_mode: ScaleMode,
}

impl Default for PlantedExperiment {
    fn default() -> Self {
        Self {
            d: 16,
            length: 256,
            prompt_len: 32,
            strength: 10.0,
            seeds: (0..20).collect(),
            prompt_bias: 0.5,
            mlp_gain: 0.1,
            scale_mode: ScaleMode::InverseStep,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub planted: f64,
    pub random: f64,
    pub planted_degenerate: bool,
    pub random_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedComparison {
    pub mean_planted: f64,
    pub mean_random: f64,
    pub per_seed: Vec<SeedOutcome>,
}

/// Runs full-cache generation under planted and plain weights from the same
/// seed and prompt, and compares their persistence ratios.
pub fn planted_persistence_experiment(
    cfg: &PlantedExperiment,
    exec: Execution,
) -> Result<PlantedComparison> {
    ensure!(cfg.strength >= 0.0, "planted strength must be >= 0");
    ensure!(!cfg.seeds.is_empty(), "at least one seed required");
    ensure!(
        cfg.prompt_len >= 2 && cfg.prompt_len < cfg.length,
        "prompt length must lie in [2, length)"
    );
    let init = WeightInit {
        mlp_gain: cfg.mlp_gain,
        ..WeightInit::default()
    };
    let steps = cfg.length - cfg.prompt_len;
    let per_seed = map_slice(exec, &cfg.seeds, |&seed| -> Result<SeedOutcome> {
        let planted = planted_weights(cfg.d, &init, cfg.strength, seed)?;
        let random = planted_weights(cfg.d, &init, 0.0, seed)?;
        let prompt = synthetic_prompt(
            cfg.d,
            cfg.prompt_len,
            PromptKind::Random,
            Some((&planted.direction, cfg.prompt_bias)),
            &mut Rng::derive(seed, 2),
        )?;
        let ratio = |w: &ToyModelWeights| -> Result<(f64, bool)> {
            let run = generate_reference(w, &prompt, steps, cfg.scale_mode)?;
            let report = persistence_report(&run.trace, None, None)?;
            let e = &report.entries[0];
            Ok((e.ratio, e.degenerate))
        };
        let (p, pd) = ratio(&planted.weights)?;
        let (r, rd) = ratio(&random.weights)?;
        Ok(SeedOutcome {
            seed,
            planted: p,
            random: r,
            planted_degenerate: pd,
            random_degenerate: rd,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = per_seed.len() as f64;
    Ok(PlantedComparison {
        mean_planted: per_seed.iter().map(|s| s.planted).sum::<f64>() / n,
        mean_random: per_seed.iter().map(|s| s.random).sum::<f64>() / n,
        per_seed,
    })
}

/// Unit tokens orthogonal to `direction`, except position `planted`, which is
/// `direction` itself.
pub fn planted_history(
    direction: &Vector,
    len: usize,
    planted: usize,
    rng: &mut Rng,
) -> Result<Vec<Vector>> {
    ensure!(
        planted < len,
        "planted position {planted} outside history of {len}"
    );
    let d = direction.len();
    ensure!(d >= 2, "dimension must be at least 2");
    (0..len)
        .map(|i| {
            if i == planted {
                return Ok(direction.clone());
            }
            let mut z = rng.unit_vector(d);
            z.axpy(-z.dot(direction)?, direction)?;
            z.normalized()
        })
        .collect()
}
