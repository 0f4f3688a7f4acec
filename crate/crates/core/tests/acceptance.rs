//! Acceptance suite: one pass/fail line per criterion, tolerances pinned here.
//! Exits nonzero if any criterion fails.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use budget_kv::analysis::change_ratio;
use budget_kv::cli::{BoundConfig, QuantEvalConfig};
use budget_kv::kvcache::{BudgetedKvCache, CacheConfig, CounterMode};
use budget_kv::numerics::{softmax, Rng, Vector};
use budget_kv::parallel::Execution;
use budget_kv::planner::{kv_cache_bytes, max_batch, DeploymentSpec, GIB};
use budget_kv::quant::{dequantize, quantize_group};
use budget_kv::theory::{
    check_pivotal_interval, inner_product_deviation_check, interaction_matrix, planted_history,
    planted_persistence_experiment, planted_weights, PlantedExperiment,
};
use budget_kv::toymodel::{
    attention_lipschitz_check, generate_compressed, generate_reference, mlp_lipschitz_check,
    synthetic_prompt, PromptKind, ScaleMode, ToyModelWeights, WeightInit,
};

const ZERO_ERROR_TOL: f64 = 1e-12;
const RENORM_TOL: f64 = 1e-9;
const CHECK_TOL: f64 = 1e-9;
const ROUND_TRIP_SLACK: f64 = 1e-12;
const AGREEMENT_MIN: f64 = 0.9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn toy(seed: u64, d: usize, prompt_len: usize) -> (ToyModelWeights, Vec<Vector>) {
    let mut rng = Rng::new(seed);
    let w = ToyModelWeights::gaussian(d, d, 2 * d, &WeightInit::default(), &mut rng);
    let p = synthetic_prompt(d, prompt_len, PromptKind::Random, None, &mut rng).unwrap();
    (w, p)
}

fn c1_kv_table() -> Outcome {
    let gib = |s: DeploymentSpec| kv_cache_bytes(&s) as f64 / GIB;
    let (opt, llama, bloom) = (
        gib(DeploymentSpec::opt_175b()),
        gib(DeploymentSpec::llama_65b()),
        gib(DeploymentSpec::bloom_176b()),
    );
    let rel = (bloom - 950.0).abs() / 950.0;
    outcome(
        opt == 1152.0 && llama == 640.0 && rel <= 0.05,
        format!(
            "OPT {opt} GiB, LLaMA {llama} GiB, BLOOM {bloom} GiB vs 950 ({:.1}% off)",
            100.0 * rel
        ),
    )
}

fn c2_max_batch() -> Outcome {
    let llama = max_batch(&DeploymentSpec::llama_65b()).unwrap();
    let opt = max_batch(&DeploymentSpec::opt_175b()).unwrap();
    let bloom = max_batch(&DeploymentSpec::bloom_176b()).unwrap();
    outcome(
        llama == 102 && opt.abs_diff(34) <= 2 && bloom.abs_diff(36) <= 2,
        format!("LLaMA {llama} (102), OPT {opt} (34 +/- 2), BLOOM {bloom} (36 +/- 2)"),
    )
}

fn c3_zero_error() -> Outcome {
    let (d, total, prompt_len) = (8, 128, 8);
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (w, p) = toy(seed, d, prompt_len);
        let steps = total - prompt_len;
        let r = generate_reference(&w, &p, steps, ScaleMode::InverseStep).unwrap();
        let c = generate_compressed(
            &w,
            &p,
            steps,
            &CacheConfig::with_budget(total),
            ScaleMode::InverseStep,
        )
        .unwrap();
        for (x, y) in r.tokens.iter().zip(&c.tokens) {
            worst = worst.max(x.max_abs_diff(y).unwrap());
        }
    }
    outcome(
        worst <= ZERO_ERROR_TOL,
        format!("20 seeds, max element diff {worst:e}"),
    )
}

/// Drives one randomized stream; returns the evicted position sets, or an
/// invariant violation.
fn cache_stream(cfg_seed: u64, appends: usize) -> Result<Vec<Vec<usize>>, String> {
    let mut rng = Rng::derive(1234, cfg_seed);
    let budget = 2 + rng.below(40);
    let drop_amount = 1 + rng.below(budget);
    let recent_window = rng.below(budget - drop_amount + 1);
    let config = CacheConfig {
        budget,
        recent_window,
        history_window: 1 + rng.below(50),
        drop_amount,
        counter_mode: if rng.below(2) == 0 {
            CounterMode::Maintained
        } else {
            CounterMode::Replay
        },
        quant_group: None,
    };
    let dim = 4;
    let mut cache = BudgetedKvCache::new(config, dim).unwrap();
    let mut mirror: Vec<usize> = Vec::new();
    let mut evicted_sets = Vec::new();
    for pos in 0..appends {
        let k = rng.gaussian_vector(dim, 1.0);
        let v = rng.gaussian_vector(dim, 1.0);
        mirror.push(pos);
        if let Some(out) = cache.append(k, v, pos).map_err(|e| e.to_string())? {
            let protected = &mirror[mirror.len().saturating_sub(recent_window)..];
            let ev = out.positions();
            if let Some(p) = ev.iter().find(|p| protected.contains(p)) {
                return Err(format!("config {cfg_seed}: evicted recent position {p}"));
            }
            mirror.retain(|p| !ev.contains(p));
            evicted_sets.push(ev);
        }
        if cache.occupancy() > budget {
            return Err(format!(
                "config {cfg_seed}: occupancy {} > {budget}",
                cache.occupancy()
            ));
        }
        if cache.positions() != mirror {
            return Err(format!(
                "config {cfg_seed}: stored positions diverge from the model"
            ));
        }
        let q = rng.gaussian_vector(dim, 1.0);
        cache
            .attend(&q, 1.0 / (pos + 1) as f64, pos + 1)
            .map_err(|e| e.to_string())?;
    }
    Ok(evicted_sets)
}

fn c4_cache_invariants() -> Outcome {
    let mut compressions = 0;
    for cfg in 0..100 {
        let a = match cache_stream(cfg, 100) {
            Ok(a) => a,
            Err(e) => return outcome(false, e),
        };
        let b = cache_stream(cfg, 100).unwrap();
        if a != b {
            return outcome(
                false,
                format!("config {cfg}: evicted sets differ between identical runs"),
            );
        }
        compressions += a.len();
    }
    outcome(
        true,
        format!("100 configs x 100 appends, {compressions} compressions"),
    )
}

fn c5_renormalization() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = Rng::new(5);
    for _ in 0..1000 {
        let t = 2 + rng.below(63);
        let dim = 1 + rng.below(8);
        let budget = 1 + rng.below(t);
        let config = CacheConfig::with_budget(budget);
        let mut cache = BudgetedKvCache::new(config, dim).unwrap();
        let keys: Vec<Vector> = (0..t).map(|_| rng.gaussian_vector(dim, 1.0)).collect();
        for (p, k) in keys.iter().enumerate() {
            cache
                .append(k.clone(), rng.gaussian_vector(dim, 1.0), p)
                .unwrap();
            let q = rng.gaussian_vector(dim, 1.0);
            cache.attend(&q, 0.5, p + 1).unwrap();
        }
        let q = rng.gaussian_vector(dim, 1.0);
        let scale = rng.uniform_range(0.05, 2.0);
        let est = cache.estimate_attention(&q, scale).unwrap();
        let logits: Vec<f64> = keys.iter().map(|k| scale * q.dot(k).unwrap()).collect();
        let full = softmax(&logits).unwrap();
        let kept = cache.positions();
        let mass: f64 = kept.iter().map(|&p| full[p]).sum();
        for (j, &p) in kept.iter().enumerate() {
            worst = worst.max((est.scores[j] - full[p] / mass).abs());
        }
    }
    outcome(
        worst <= RENORM_TOL,
        format!("1000 instances, max |diff| {worst:e}"),
    )
}

fn c6_monte_carlo() -> Outcome {
    let s = budget_kv::cli::bound_summary(&BoundConfig::default(), Execution::preferred()).unwrap();
    let exceeded: Vec<String> = s
        .rows
        .iter()
        .filter(|r| !r.within_bound)
        .map(|r| format!("k={} f={}", r.k, r.fraction))
        .collect();
    let min_fp = s
        .rows
        .iter()
        .map(|r| r.failure_probability)
        .fold(f64::INFINITY, f64::min);
    outcome(
        s.pass,
        format!(
            "{}/{} qualifying points within bound (min failure probability {min_fp:.0}); \
             empirical mean above bound at [{}]",
            s.compared_pass,
            s.compared_points,
            exceeded.join(", ")
        ),
    )
}

fn c7_bound_checks() -> Outcome {
    let w = ToyModelWeights::gaussian(16, 16, 32, &WeightInit::default(), &mut Rng::new(7));
    let b1 = inner_product_deviation_check(16, 10_000, 42, Execution::preferred()).unwrap();
    let b4 = attention_lipschitz_check(&w, 16, 10_000, 42, Execution::preferred()).unwrap();
    let b6 = mlp_lipschitz_check(&w, 10_000, 42, Execution::preferred()).unwrap();
    let ok = [b1, b4, b6]
        .iter()
        .all(|r| r.trials == 10_000 && r.violations == 0 && r.worst_slack >= -CHECK_TOL);
    outcome(
        ok,
        format!(
            "violations {}/{}/{}, worst slack {:.2e}/{:.2e}/{:.2e}",
            b1.violations,
            b4.violations,
            b6.violations,
            b1.worst_slack,
            b4.worst_slack,
            b6.worst_slack
        ),
    )
}

fn c8_interval_checker() -> Outcome {
    let init = WeightInit {
        mlp_gain: 0.01,
        ..WeightInit::default()
    };
    let (mut verified, mut verdicts, mut violations) = (0, 0, 0);
    for seed in 0..100 {
        let pw = planted_weights(16, &init, 1e4, seed).unwrap();
        let hist = planted_history(&pw.direction, 12, 4, &mut Rng::derive(seed, 3)).unwrap();
        let a = interaction_matrix(&pw.weights).unwrap();
        let c = 0.5 * pw.direction.dot(&a.matvec(&pw.direction).unwrap()).unwrap();
        let r = check_pivotal_interval(&pw.weights, &hist, c, 0.1, ScaleMode::InverseStep).unwrap();
        if r.delta_ok && !r.verdicts.is_empty() {
            verified += 1;
        }
        verdicts += r.verdicts.len();
        violations += r.violations();
    }
    outcome(
        verified == 100 && violations == 0,
        format!("{verified}/100 seeds with assumptions verified, {verdicts} verdicts, {violations} violations"),
    )
}

fn c9_persistence() -> Outcome {
    let r = planted_persistence_experiment(&PlantedExperiment::default(), Execution::preferred())
        .unwrap();
    let in_range = (0.0..=1.0).contains(&r.mean_planted) && (0.0..=1.0).contains(&r.mean_random);
    outcome(
        in_range && r.mean_planted > r.mean_random,
        format!(
            "planted {:.4} vs random {:.4} over {} seeds",
            r.mean_planted,
            r.mean_random,
            r.per_seed.len()
        ),
    )
}

fn c10_change_ratio() -> Outcome {
    let (total, prompt_len) = (128, 8);
    let steps = total - prompt_len;
    let mut worst_full = 0.0f64;
    let (mut evicted_pairs, mut bad_pairs) = (0, 0);
    for seed in 0..10 {
        let (w, p) = toy(seed, 8, prompt_len);
        let r = generate_reference(&w, &p, steps, ScaleMode::InverseStep).unwrap();
        let full = generate_compressed(
            &w,
            &p,
            steps,
            &CacheConfig::with_budget(total),
            ScaleMode::InverseStep,
        )
        .unwrap();
        let cr = change_ratio(&full.trace, &r.trace, 0, 0).unwrap();
        worst_full = cr.values().iter().fold(worst_full, |m, v| m.max(v.abs()));

        let c = generate_compressed(
            &w,
            &p,
            steps,
            &CacheConfig::with_budget(32),
            ScaleMode::InverseStep,
        )
        .unwrap();
        let cr = change_ratio(&c.trace, &r.trace, 0, 0).unwrap();
        for e in &c.evictions {
            for pair in cr
                .pairs
                .iter()
                .filter(|x| x.key_pos == e.position && x.query_pos >= e.query_pos)
            {
                evicted_pairs += 1;
                if pair.ratio != -1.0 {
                    bad_pairs += 1;
                }
            }
        }
    }
    outcome(
        worst_full <= ZERO_ERROR_TOL && bad_pairs == 0 && evicted_pairs > 0,
        format!("full budget max |ratio| {worst_full:e}; {evicted_pairs} evicted pairs, {bad_pairs} not -1"),
    )
}

fn c11_quantization() -> Outcome {
    // Round trip, element by element.
    let mut rng = Rng::new(42);
    let mut checked = 0usize;
    let mut round_trip_ok = true;
    for _ in 0..2000 {
        let n = 1 + rng.below(200);
        let g = 1 + rng.below(80);
        let spread = 10f64.powf(rng.uniform_range(-3.0, 3.0));
        let v: Vec<f64> = (0..n).map(|_| spread * rng.normal()).collect();
        let blocks = quantize_group(&v, g).unwrap();
        let back = dequantize(&blocks).unwrap();
        for (i, (&x, &y)) in v.iter().zip(back.iter()).enumerate() {
            checked += 1;
            if (x - y).abs() > blocks[i / g].scale / 2.0 + ROUND_TRIP_SLACK * spread.max(1.0) {
                round_trip_ok = false;
            }
        }
    }

    // Same recorded flags, with and without 4-bit storage.
    let mut same_evictions = true;
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let mut config = CacheConfig::with_budget(8 + rng.below(24));
        let mut plain = BudgetedKvCache::new(config.clone(), 8).unwrap();
        config.quant_group = Some(4);
        let mut quant = BudgetedKvCache::new(config, 8).unwrap();
        for pos in 0..200 {
            let (k, v) = (rng.gaussian_vector(8, 1.0), rng.gaussian_vector(8, 1.0));
            let a = plain.append(k.clone(), v.clone(), pos).unwrap();
            let b = quant.append(k, v, pos).unwrap();
            if a.map(|o| o.positions()) != b.map(|o| o.positions()) {
                same_evictions = false;
            }
            let logits: Vec<f64> = (0..plain.occupancy()).map(|_| rng.normal()).collect();
            let scores = softmax(&logits).unwrap();
            plain.record_scores(&scores, pos + 1).unwrap();
            quant.record_scores(&scores, pos + 1).unwrap();
        }
    }

    let sweep =
        budget_kv::cli::quant_eval_summary(&QuantEvalConfig::default(), Execution::preferred())
            .unwrap();
    outcome(
        round_trip_ok && same_evictions && sweep.agreement_rate >= AGREEMENT_MIN,
        format!(
            "round trip {} over {checked} elements; evictions {}; argmax agreement {:.3} (need {AGREEMENT_MIN}), \
             {:.1}% of rows are near ties",
            if round_trip_ok { "ok" } else { "FAILED" },
            if same_evictions { "identical" } else { "DIFFER" },
            sweep.agreement_rate,
            100.0 * sweep.near_tie_share
        ),
    )
}

fn c12_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_budget-kv");
    let runs: [(&str, &[&str]); 5] = [
        (
            "generate",
            &[
                "generate", "--seed", "42", "--steps", "128", "--budget", "64",
            ],
        ),
        ("persistence", &["persistence", "--planted"]),
        ("bound", &["bound", "--trials", "300"]),
        ("quant_eval", &["quant-eval"]),
        (
            "plan",
            &[
                "plan",
                "--preset",
                "opt-175b",
                "--total-budget",
                "4096",
                "--heads",
                "4",
            ],
        ),
    ];
    let tmp = tempfile::tempdir().unwrap();
    for (name, args) in runs {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let dir = tmp.path().join(format!("{name}-{rep}"));
            let status = Command::new(bin)
                .args(args)
                .arg("--out")
                .arg(&dir)
                .output()
                .unwrap();
            if !status.status.success() {
                return outcome(false, format!("{name} exited with {}", status.status));
            }
            outputs.push(fs::read(dir.join(format!("{name}.json"))).unwrap());
        }
        if outputs[0] != outputs[1] {
            return outcome(false, format!("{name} summaries differ"));
        }
    }
    outcome(true, "5 subcommands, byte-identical JSON summaries")
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        (
            1,
            "planner KV cache table",
            Duration::from_secs(1),
            c1_kv_table,
        ),
        (
            2,
            "planner max batch table",
            Duration::from_secs(1),
            c2_max_batch,
        ),
        (
            3,
            "zero error at full budget",
            Duration::from_secs(30),
            c3_zero_error,
        ),
        (
            4,
            "cache invariants",
            Duration::from_secs(60),
            c4_cache_invariants,
        ),
        (
            5,
            "subset renormalization",
            Duration::from_secs(10),
            c5_renormalization,
        ),
        (
            6,
            "tail bound Monte Carlo",
            Duration::from_secs(120),
            c6_monte_carlo,
        ),
        (
            7,
            "randomized bound checks",
            Duration::from_secs(60),
            c7_bound_checks,
        ),
        (
            8,
            "pivotal interval checker",
            Duration::from_secs(60),
            c8_interval_checker,
        ),
        (
            9,
            "persistence directionality",
            Duration::from_secs(120),
            c9_persistence,
        ),
        (
            10,
            "change ratio",
            Duration::from_secs(30),
            c10_change_ratio,
        ),
        (
            11,
            "quantization",
            Duration::from_secs(60),
            c11_quantization,
        ),
        (
            12,
            "CLI determinism",
            Duration::from_secs(30),
            c12_determinism,
        ),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let pass = o.pass && elapsed <= limit;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {:<28} {}  {} [{:.2}s, limit {}s]",
            name,
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("acceptance: {}/12 passed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
