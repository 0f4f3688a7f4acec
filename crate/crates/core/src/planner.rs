//! Deployment memory arithmetic and per-head budget allocation.
//!
//! Sizes are in bytes; the GiB figures divide by 2³⁰.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSpec {
    pub layers: u64,
    pub hidden: u64,
    pub batch: u64,
    pub seq_len: u64,
    pub bytes_per_element: f64,
    pub param_count: u64,
    pub device_memory_bytes: u64,
    /// Memory held back for activations and communication.
    #[serde(default)]
    pub reserved_bytes: u64,
    /// Measured weight footprint, used instead of `param_count × bytes_per_element`.
    #[serde(default)]
    pub weight_bytes_override: Option<u64>,
}

impl DeploymentSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.layers >= 1, "layers must be positive");
        ensure!(self.hidden >= 1, "hidden size must be positive");
        ensure!(self.seq_len >= 1, "sequence length must be positive");
        ensure!(
            self.bytes_per_element.is_finite() && self.bytes_per_element > 0.0,
            "bytes per element must be positive"
        );
        ensure!(
            self.device_memory_bytes >= 1,
            "device memory must be positive"
        );
        Ok(())
    }

    pub fn weight_bytes(&self) -> u64 {
        self.weight_bytes_override
            .unwrap_or_else(|| weight_bytes(self.param_count, self.bytes_per_element))
    }

    fn preset(layers: u64, hidden: u64, params: u64, weight_gib: u64) -> Self {
        Self {
            layers,
            hidden,
            batch: 128,
            seq_len: 2048,
            bytes_per_element: 2.0,
            param_count: params,
            device_memory_bytes: 640 << 30,
            reserved_bytes: 0,
            weight_bytes_override: Some(weight_gib << 30),
        }
    }

    /// 96 layers, hidden 12288, 325 GiB of fp16 weights on 8×80 GiB.
    pub fn opt_175b() -> Self {
        Self::preset(96, 12288, 175_000_000_000, 325)
    }

    /// 80 layers, hidden 8192, 130 GiB of fp16 weights on 8×80 GiB.
    pub fn llama_65b() -> Self {
        Self::preset(80, 8192, 65_000_000_000, 130)
    }

    /// 70 layers, hidden 14336, 352 GiB of fp16 weights on 8×80 GiB.
    pub fn bloom_176b() -> Self {
        Self::preset(70, 14336, 176_000_000_000, 352)
    }

    pub fn presets() -> Vec<(&'static str, Self)> {
        vec![
            ("opt-175b", Self::opt_175b()),
            ("llama-65b", Self::llama_65b()),
            ("bloom-176b", Self::bloom_176b()),
        ]
    }
}

fn round_bytes(x: f64) -> u64 {
    x.round() as u64
}

/// `2 · L · b · s · d · bytes_per_element` (keys and values).
pub fn kv_cache_bytes(spec: &DeploymentSpec) -> u64 {
    let elements = 2 * spec.layers * spec.batch * spec.seq_len * spec.hidden;
    round_bytes(elements as f64 * spec.bytes_per_element)
}

pub fn weight_bytes(param_count: u64, bytes_per_element: f64) -> u64 {
    round_bytes(param_count as f64 * bytes_per_element)
}

/// Largest batch whose full-length KV cache fits beside the weights and the
/// reserved buffer.
pub fn max_batch(spec: &DeploymentSpec) -> Result<u64> {
    spec.validate()?;
    let fixed = spec.weight_bytes() + spec.reserved_bytes;
    if fixed > spec.device_memory_bytes {
        return Err(Error::Capacity(format!(
            "weights and reserve ({fixed} bytes) exceed device memory ({} bytes)",
            spec.device_memory_bytes
        )));
    }
    let per_sample = kv_cache_bytes(&DeploymentSpec {
        batch: 1,
        ..spec.clone()
    });
    Ok((spec.device_memory_bytes - fixed) / per_sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AllocationStrategy {
    Uniform,
    /// Layer `l` receives a share proportional to `1 + slope · l/(L−1)`.
    Ramp {
        slope: f64,
    },
}

impl Default for AllocationStrategy {
    fn default() -> Self {
        Self::Ramp { slope: 1.0 }
    }
}

impl AllocationStrategy {
    fn slope(self) -> f64 {
        match self {
            Self::Uniform => 0.0,
            Self::Ramp { slope } => slope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub layers: usize,
    pub heads: usize,
    pub strategy: AllocationStrategy,
    pub floor_per_head: usize,
    /// Layer-major token budgets.
    pub budgets: Vec<usize>,
}

impl BudgetAllocation {
    pub fn get(&self, layer: usize, head: usize) -> usize {
        self.budgets[layer * self.heads + head]
    }

    pub fn layer_totals(&self) -> Vec<usize> {
        self.budgets
            .chunks(self.heads)
            .map(|c| c.iter().sum())
            .collect()
    }

    pub fn total(&self) -> usize {
        self.budgets.iter().sum()
    }
}

/// Splits `total` tokens across layers by the strategy's weights, then evenly
/// across heads. Layers whose share would fall below `heads · floor` are
/// pinned there and the rest re-split; rounding residue goes to the last
/// layer, and within a layer to the last head.
pub fn allocate_budget(
    total: usize,
    layers: usize,
    heads: usize,
    strategy: AllocationStrategy,
    floor_per_head: usize,
) -> Result<BudgetAllocation> {
    ensure!(
        layers >= 1 && heads >= 1,
        "layers and heads must be positive"
    );
    let slope = strategy.slope();
    ensure!(
        slope.is_finite() && slope > -1.0,
        "ramp slope must exceed -1"
    );
    let layer_floor = heads * floor_per_head;
    ensure!(
        total >= layers * layer_floor,
        "total {total} below the floor of {} tokens",
        layers * layer_floor
    );
    let weight = |l: usize| {
        if layers == 1 {
            1.0
        } else {
            1.0 + slope * l as f64 / (layers - 1) as f64
        }
    };
    let mut pinned = vec![false; layers];
    let shares = loop {
        let free_weight: f64 = (0..layers).filter(|&l| !pinned[l]).map(weight).sum();
        let remaining = (total - pinned.iter().filter(|&&p| p).count() * layer_floor) as f64;
        let shares: Vec<f64> = (0..layers)
            .map(|l| {
                if pinned[l] {
                    layer_floor as f64
                } else {
                    remaining * weight(l) / free_weight
                }
            })
            .collect();
        let mut changed = false;
        for l in 0..layers {
            if !pinned[l] && shares[l] < layer_floor as f64 {
                pinned[l] = true;
                changed = true;
            }
        }
        if !changed {
            break shares;
        }
    };
    // The small offset keeps exact quotients such as 120/6 from flooring to 19.
    let mut layer_totals: Vec<usize> = shares
        .iter()
        .map(|&s| ((s + 1e-9).floor() as usize).max(layer_floor))
        .collect();
    let assigned: usize = layer_totals[..layers - 1].iter().sum();
    layer_totals[layers - 1] = total - assigned;
    let mut budgets = Vec::with_capacity(layers * heads);
    for lt in layer_totals {
        let per = lt / heads;
        budgets.extend(std::iter::repeat_n(per, heads - 1));
        budgets.push(lt - per * (heads - 1));
    }
    Ok(BudgetAllocation {
        layers,
        heads,
        strategy,
        floor_per_head,
        budgets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub spec: DeploymentSpec,
    pub kv_cache_bytes: u64,
    pub kv_cache_gib: f64,
    pub weight_bytes: u64,
    pub weight_gib: f64,
    pub per_sample_kv_bytes: u64,
    pub max_batch: u64,
}

pub fn plan(spec: &DeploymentSpec) -> Result<PlanReport> {
    spec.validate()?;
    let kv = kv_cache_bytes(spec);
    let w = spec.weight_bytes();
    Ok(PlanReport {
        spec: spec.clone(),
        kv_cache_bytes: kv,
        kv_cache_gib: kv as f64 / GIB,
        weight_bytes: w,
        weight_gib: w as f64 / GIB,
        per_sample_kv_bytes: kv_cache_bytes(&DeploymentSpec {
            batch: 1,
            ..spec.clone()
        }),
        max_batch: max_batch(spec)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kv_cache_table_rows() {
        assert_eq!(
            kv_cache_bytes(&DeploymentSpec::opt_175b()),
            1_236_950_581_248
        );
        assert_eq!(
            kv_cache_bytes(&DeploymentSpec::opt_175b()) as f64 / GIB,
            1152.0
        );
        assert_eq!(
            kv_cache_bytes(&DeploymentSpec::llama_65b()) as f64 / GIB,
            640.0
        );
        // Printed as 950; the formula gives 980.
        let bloom = kv_cache_bytes(&DeploymentSpec::bloom_176b()) as f64 / GIB;
        assert_eq!(bloom, 980.0);
        assert!((bloom - 950.0).abs() / 950.0 < 0.05);
        let empty = DeploymentSpec {
            batch: 0,
            ..DeploymentSpec::opt_175b()
        };
        assert_eq!(kv_cache_bytes(&empty), 0);
    }

    #[test]
    fn weight_examples() {
        let opt = weight_bytes(175_000_000_000, 2.0) as f64 / GIB;
        assert!((opt - 325.96).abs() < 0.01);
        let llama = weight_bytes(65_000_000_000, 2.0) as f64 / GIB;
        assert!((llama - 130.0).abs() / 130.0 < 0.10, "{llama}");
        assert_eq!(weight_bytes(0, 2.0), 0);
    }

    #[test]
    fn max_batch_table_rows() {
        assert_eq!(max_batch(&DeploymentSpec::llama_65b()).unwrap(), 102);
        assert_eq!(max_batch(&DeploymentSpec::opt_175b()).unwrap(), 35);
        assert_eq!(max_batch(&DeploymentSpec::bloom_176b()).unwrap(), 37);
        let from_params = DeploymentSpec {
            weight_bytes_override: None,
            ..DeploymentSpec::opt_175b()
        };
        assert_eq!(max_batch(&from_params).unwrap(), 34);
    }

    #[test]
    fn max_batch_capacity_limits() {
        let mut s = DeploymentSpec::llama_65b();
        s.device_memory_bytes = s.weight_bytes();
        assert_eq!(max_batch(&s).unwrap(), 0);
        s.device_memory_bytes -= 1;
        assert!(matches!(max_batch(&s), Err(Error::Capacity(_))));
        let mut r = DeploymentSpec::llama_65b();
        r.reserved_bytes = 5 << 30;
        assert_eq!(max_batch(&r).unwrap(), 101);
    }

    #[test]
    fn ramp_example_by_hand() {
        // Weights 1, 4/3, 5/3, 2 sum to 6.
        let a = allocate_budget(120, 4, 1, AllocationStrategy::Ramp { slope: 1.0 }, 10).unwrap();
        assert_eq!(a.budgets, vec![20, 26, 33, 41]);
        // 100·(1, 4/3, 5/3)/6 = 16.67, 22.22, 27.78; residue 35.
        let b = allocate_budget(100, 4, 1, AllocationStrategy::Ramp { slope: 1.0 }, 10).unwrap();
        assert_eq!(b.budgets, vec![16, 22, 27, 35]);
    }

    #[test]
    fn slope_zero_is_uniform() {
        let u = allocate_budget(103, 3, 2, AllocationStrategy::Uniform, 4).unwrap();
        let r = allocate_budget(103, 3, 2, AllocationStrategy::Ramp { slope: 0.0 }, 4).unwrap();
        assert_eq!(u.budgets, r.budgets);
        assert_eq!(u.budgets, vec![17, 17, 17, 17, 17, 18]);
    }

    #[test]
    fn exact_floor_total() {
        let a = allocate_budget(48, 4, 3, AllocationStrategy::Ramp { slope: 3.0 }, 4).unwrap();
        assert!(a.budgets.iter().all(|&b| b == 4));
        assert!(allocate_budget(47, 4, 3, AllocationStrategy::Uniform, 4).is_err());
    }

    #[test]
    fn steep_ramp_pins_early_layers() {
        let a = allocate_budget(100, 4, 1, AllocationStrategy::Ramp { slope: 20.0 }, 10).unwrap();
        assert_eq!(a.budgets[0], 10);
        assert_eq!(a.total(), 100);
    }

    proptest! {
        #[test]
        fn allocation_sums_and_floors(
            layers in 1usize..12, heads in 1usize..8, floor in 0usize..20,
            extra in 0usize..5000, slope in 0.0f64..5.0,
        ) {
            let total = layers * heads * floor + extra;
            let a = allocate_budget(total, layers, heads, AllocationStrategy::Ramp { slope }, floor).unwrap();
            prop_assert_eq!(a.total(), total);
            prop_assert!(a.budgets.iter().all(|&b| b >= floor));
            let lt = a.layer_totals();
            prop_assert!(lt.windows(2).all(|w| w[0] <= w[1]), "{:?}", lt);
        }

        #[test]
        fn kv_bytes_linear(b in 0u64..256, s in 1u64..8192) {
            let base = DeploymentSpec { batch: 1, seq_len: 1, ..DeploymentSpec::llama_65b() };
            let unit = kv_cache_bytes(&base);
            prop_assert_eq!(kv_cache_bytes(&DeploymentSpec { batch: b, seq_len: s, ..base }), unit * b * s);
        }

        #[test]
        fn max_batch_monotone(s in 1u64..4096, ds in 1u64..4096, p in 0u64..100_000_000_000, dp in 0u64..50_000_000_000) {
            let base = DeploymentSpec { seq_len: s, param_count: p, weight_bytes_override: None, ..DeploymentSpec::llama_65b() };
            let longer = DeploymentSpec { seq_len: s + ds, ..base.clone() };
            let heavier = DeploymentSpec { param_count: p + dp, ..base.clone() };
            let b0 = max_batch(&base).unwrap();
            prop_assert!(max_batch(&longer).unwrap() <= b0);
            prop_assert!(max_batch(&heavier).map_or(true, |b| b <= b0));
        }
    }
}
