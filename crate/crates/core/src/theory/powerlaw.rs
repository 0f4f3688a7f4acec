//! Truncated power-law weights and the budgeted-cache tail bound.
//!
//! Weights follow `f(x) = c (x + b)^{-k}` on `[0, u − b)` with
//! `c = (k − 1) / (b^{1−k} − u^{1−k})`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{Rng, Vector};
use crate::parallel::{map_indexed, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawParams {
    pub k: f64,
    pub b: f64,
    pub u: f64,
}

impl PowerLawParams {
    pub fn new(k: f64, b: f64, u: f64) -> Result<Self> {
        let p = Self { k, b, u };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.k.is_finite() && self.k > 2.0,
            "exponent k must exceed 2, got {}",
            self.k
        );
        ensure!(
            self.b.is_finite() && self.b > 0.0,
            "offset b must be positive"
        );
        ensure!(
            self.u.is_finite() && self.u > self.b,
            "upper parameter u must exceed b"
        );
        Ok(())
    }

    fn tail_gap(&self) -> f64 {
        self.b.powf(1.0 - self.k) - self.u.powf(1.0 - self.k)
    }

    pub fn normalizer(&self) -> f64 {
        (self.k - 1.0) / self.tail_gap()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if (0.0..self.u - self.b).contains(&x) {
            self.normalizer() * (x + self.b).powf(-self.k)
        } else {
            0.0
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= self.u - self.b {
            return 1.0;
        }
        (self.b.powf(1.0 - self.k) - (x + self.b).powf(1.0 - self.k)) / self.tail_gap()
    }

    /// `F⁻¹(q) = b (1 − q (1 − (u/b)^{1−k}))^{−1/(k−1)} − b`.
    pub fn inverse_cdf(&self, q: f64) -> f64 {
        let (k, b) = (self.k, self.b);
        let inner = 1.0 - q * (1.0 - (self.u / b).powf(1.0 - k));
        (b * inner.powf(-1.0 / (k - 1.0)) - b).clamp(0.0, self.u - self.b)
    }

    /// `E[x] = c (b^{2−k} − u^{2−k}) / (k − 2) − b`.
    pub fn mean(&self) -> f64 {
        let k = self.k;
        self.normalizer() * (self.b.powf(2.0 - k) - self.u.powf(2.0 - k)) / (k - 2.0) - self.b
    }

    pub fn variance(&self) -> f64 {
        // E[(x+b)^2] = c (u^{3−k} − b^{3−k}) / (3 − k), or c ln(u/b) at k = 3.
        let k = self.k;
        let c = self.normalizer();
        let second = if (k - 3.0).abs() < 1e-12 {
            c * (self.u / self.b).ln()
        } else {
            c * (self.u.powf(3.0 - k) - self.b.powf(3.0 - k)) / (3.0 - k)
        };
        let m = self.mean() + self.b;
        second - m * m
    }
}

/// `n` i.i.d. draws by inverse-CDF sampling.
pub fn sample_power_law(params: &PowerLawParams, n: usize, rng: &mut Rng) -> Result<Vector> {
    params.validate()?;
    ensure!(n >= 1, "sample count must be at least 1");
    Vector::new((0..n).map(|_| params.inverse_cdf(rng.uniform())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub budget: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub epsilon: f64,
    pub params: PowerLawParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailBound {
    /// Bound on the expected dropped attention mass.
    pub bound: f64,
    /// The same expression with prefactor 2.1 in place of 1/0.98, bounding
    /// the expected token error.
    pub error_bound: f64,
    /// `k − (k−1)((1−ε)/(B/T_max − ε))^{1/(k−1)}`.
    pub bracket: f64,
    /// The bound carries no information (`bracket ≤ 0`).
    pub vacuous: bool,
    /// Probability mass outside the guarantee; may exceed 1.
    pub failure_probability: f64,
}

pub fn tail_bound(inputs: &BoundInputs) -> Result<TailBound> {
    let p = inputs.params;
    p.validate()?;
    let eps = inputs.epsilon;
    ensure!(
        eps > 0.0 && eps < 1.0,
        "epsilon must lie in (0, 1), got {eps}"
    );
    ensure!(p.u >= 5.0 * p.b, "the bound requires u >= 5b");
    ensure!(inputs.t_max >= 1, "T_max must be positive");
    ensure!(
        inputs.t_min >= 1 && inputs.t_min <= inputs.t_max,
        "T_min must lie in [1, T_max]"
    );
    ensure!(inputs.budget <= inputs.t_max, "budget exceeds T_max");
    let frac = inputs.budget as f64 / inputs.t_max as f64;
    ensure!(
        frac > eps,
        "budget fraction {frac} must exceed epsilon {eps}"
    );
    let k = p.k;
    let bracket = k - (k - 1.0) * ((1.0 - eps) / (frac - eps)).powf(1.0 / (k - 1.0));
    let shape = (1.0 - frac) / (1.0 - eps).powi(2) * bracket;
    let t_max = inputs.t_max as f64;
    let n = (inputs.t_min - 1) as f64;
    let failure_probability = t_max
        * (-(eps * eps * p.b * p.b * n) / ((k - 2.0).powi(2) * (p.u - p.b).powi(2))).exp()
        + t_max * (-2.0 * n * (1.0 - frac).powi(2) / (1.0 - eps).powi(2)).exp();
    Ok(TailBound {
        bound: shape / 0.98,
        error_bound: 2.1 * shape,
        bracket,
        vacuous: bracket <= 0.0,
        failure_probability,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroppedMass {
    pub mean: f64,
    pub max: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Share of total weight lost when only the `budget` largest weights are kept.
pub fn dropped_share(weights: &mut [f64], budget: usize) -> f64 {
    let n = weights.len();
    if budget >= n {
        return 0.0;
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return (n - budget) as f64 / n as f64;
    }
    weights.sort_by(f64::total_cmp);
    weights[..n - budget].iter().sum::<f64>() / total
}

/// Per trial, draw `t − 1` weights, normalize, keep the `budget` largest, and
/// record the dropped share. Trial `i` uses stream `i` of `seed`.
pub fn monte_carlo_dropped_mass(
    params: &PowerLawParams,
    t: usize,
    budget: usize,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<DroppedMass> {
    params.validate()?;
    ensure!(budget < t, "budget {budget} must be below t = {t}");
    ensure!(trials >= 1, "at least one trial required");
    let drops = map_indexed(exec, trials, |i| {
        let mut rng = Rng::derive(seed, i as u64);
        let mut w: Vec<f64> = (0..t - 1)
            .map(|_| params.inverse_cdf(rng.uniform()))
            .collect();
        dropped_share(&mut w, budget)
    });
    let n = trials as f64;
    let mean = drops.iter().sum::<f64>() / n;
    let var = drops.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(DroppedMass {
        mean,
        max: drops.iter().copied().fold(0.0, f64::max),
        std_error: (var / n).sqrt(),
        trials,
    })
}
