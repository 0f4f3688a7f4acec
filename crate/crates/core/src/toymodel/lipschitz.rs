//! Randomized checks of the attention and MLP Lipschitz bounds.

use serde::{Deserialize, Serialize};

use super::ToyModelWeights;
use crate::error::{ensure, Result};
use crate::numerics::{largest_singular_value, softmax, Rng, Vector};
use crate::parallel::{map_indexed, Execution};

/// Slack allowed on top of every bound.
pub const CHECK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub trials: usize,
    pub violations: usize,
    /// Smallest `bound − observed` over all trials; negative means violated.
    pub worst_slack: f64,
}

impl CheckReport {
    pub(crate) fn from_slacks(slacks: &[f64]) -> Self {
        Self {
            trials: slacks.len(),
            violations: slacks.iter().filter(|&&s| s < -CHECK_TOLERANCE).count(),
            worst_slack: slacks.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// `‖F(x₁) − F(x₂)‖ ≤ (1 + λ₁λ₂)‖x₁ − x₂‖` over random pairs. Half of the
/// pairs are small perturbations, where relu kinks matter most.
pub fn mlp_lipschitz_check(
    weights: &ToyModelWeights,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<CheckReport> {
    weights.validate()?;
    ensure!(trials >= 1, "at least one trial required");
    let l1 = largest_singular_value(&weights.w_1, 1e-12)?;
    let l2 = largest_singular_value(&weights.w_2, 1e-12)?;
    let d = weights.d();
    let slacks = map_indexed(exec, trials, |i| -> Result<f64> {
        let mut rng = Rng::derive(seed, i as u64);
        let x1 = rng.gaussian_vector(d, 1.0);
        let x2 = if i % 2 == 0 {
            rng.gaussian_vector(d, 1.0)
        } else {
            let mut y = x1.clone();
            y.axpy(
                10f64.powf(-rng.uniform_range(1.0, 6.0)),
                &rng.unit_vector(d),
            )?;
            y
        };
        let lhs = weights.mlp(&x1)?.sub(&weights.mlp(&x2)?)?.norm();
        let rhs = (1.0 + l1 * l2) * x1.sub(&x2)?.norm();
        Ok(rhs - lhs)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(CheckReport::from_slacks(&slacks))
}

/// Two unit-norm histories of `t` tokens whose rows differ by at most `Δ`:
/// `‖softmax(x_t W_Q W_Kᵀ X_{t−1}ᵀ / t) − softmax(y_t W_Q W_Kᵀ Y_{t−1}ᵀ / t)‖
/// ≤ 2 (√(t−1)/t) λ_Q λ_K Δ`.
pub fn attention_lipschitz_check(
    weights: &ToyModelWeights,
    t: usize,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<CheckReport> {
    weights.validate()?;
    ensure!(t >= 2, "histories need at least 2 tokens");
    ensure!(trials >= 1, "at least one trial required");
    let lq = largest_singular_value(&weights.w_q, 1e-12)?;
    let lk = largest_singular_value(&weights.w_k, 1e-12)?;
    let d = weights.d();
    let row = |hist: &[Vector]| -> Result<Vector> {
        let q = hist[t - 1].vecmat(&weights.w_q)?;
        let logits = hist[..t - 1]
            .iter()
            .map(|x| Ok(q.dot(&x.vecmat(&weights.w_k)?)? / t as f64))
            .collect::<Result<Vec<f64>>>()?;
        softmax(&logits)
    };
    let slacks = map_indexed(exec, trials, |i| -> Result<f64> {
        let mut rng = Rng::derive(seed, i as u64);
        let noise = 10f64.powf(-rng.uniform_range(0.0, 4.0));
        let xs: Vec<Vector> = (0..t).map(|_| rng.unit_vector(d)).collect();
        let ys = xs
            .iter()
            .map(|x| {
                let mut y = x.clone();
                y.axpy(noise, &rng.gaussian_vector(d, 1.0))?;
                y.normalized()
            })
            .collect::<Result<Vec<_>>>()?;
        let delta = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| Ok(x.sub(y)?.norm()))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let lhs = row(&xs)?.sub(&row(&ys)?)?.norm();
        let rhs = 2.0 * ((t - 1) as f64).sqrt() / t as f64 * lq * lk * delta;
        Ok(rhs - lhs)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(CheckReport::from_slacks(&slacks))
}
