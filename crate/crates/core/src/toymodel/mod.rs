//! Single-head toy transformer and budgeted-cache generation.
//!
//! Tokens are row vectors in `R^d`. With history `x_1 .. x_t`, one step is
//!
//! ```text
//! α   = softmax(s · (x_t W_Q) (X_{t-1} W_K)ᵀ)        over x_1 .. x_{t-1}
//! a_t = α · X_{t-1} W_V W_O
//! x_{t+1} = F(a_t) = a_t + W_2 relu(W_1 a_t)         optionally unit-normalized
//! ```
//!
//! with `s = 1/t` by default. Positions are 0-based: the query at position
//! `q` attends keys `0..q`, and `t = q + 1`.

mod lipschitz;
mod multihead;

pub use lipschitz::{attention_lipschitz_check, mlp_lipschitz_check, CheckReport};
pub use multihead::{
    generate_multihead, generate_multihead_reference, HeadCacheParams, LayerWeights,
    MultiHeadToyConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::kvcache::{BudgetedKvCache, CacheConfig, CompressOutcome};
use crate::numerics::{dot, softmax, Matrix, Rng, Vector};
use crate::trace::AttentionTrace;

/// Logit scaling for single-head attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `1/t`, where `t` counts the query and its history.
    #[default]
    InverseStep,
    /// `1/√p` for projection width `p`.
    InverseSqrtDim,
}

impl ScaleMode {
    pub fn scale(self, t: usize, p: usize) -> f64 {
        match self {
            ScaleMode::InverseStep => 1.0 / t as f64,
            ScaleMode::InverseSqrtDim => 1.0 / (p as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelWeights {
    /// d×p
    pub w_q: Matrix,
    /// d×p
    pub w_k: Matrix,
    /// d×p
    pub w_v: Matrix,
    /// p×d
    pub w_o: Matrix,
    /// h×d
    pub w_1: Matrix,
    /// d×h
    pub w_2: Matrix,
    pub normalize_outputs: bool,
}

/// Parameters for Gaussian weight draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightInit {
    /// Entry std of W_Q, W_K, W_V, W_O is `projection_gain / √d`.
    pub projection_gain: f64,
    /// Entry std of W_1 is `1/√d`; of W_2, `mlp_gain / √h`.
    pub mlp_gain: f64,
    pub normalize_outputs: bool,
}

impl Default for WeightInit {
    fn default() -> Self {
        Self {
            projection_gain: 1.0,
            mlp_gain: 0.1,
            normalize_outputs: true,
        }
    }
}

impl ToyModelWeights {
    pub fn gaussian(d: usize, p: usize, h: usize, init: &WeightInit, rng: &mut Rng) -> Self {
        let ps = init.projection_gain / (d as f64).sqrt();
        Self {
            w_q: Matrix::gaussian(d, p, ps, rng),
            w_k: Matrix::gaussian(d, p, ps, rng),
            w_v: Matrix::gaussian(d, p, ps, rng),
            w_o: Matrix::gaussian(p, d, ps, rng),
            w_1: Matrix::gaussian(h, d, 1.0 / (d as f64).sqrt(), rng),
            w_2: Matrix::gaussian(d, h, init.mlp_gain / (h as f64).sqrt(), rng),
            normalize_outputs: init.normalize_outputs,
        }
    }

    /// All projections are the identity and the MLP is zero.
    pub fn identity(d: usize, normalize_outputs: bool) -> Self {
        Self {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
            w_o: Matrix::identity(d),
            w_1: Matrix::zeros(d, d),
            w_2: Matrix::zeros(d, d),
            normalize_outputs,
        }
    }

    /// Copy with `W_1 = W_2 = 0`, leaving only the skip connection.
    pub fn without_mlp(&self) -> Self {
        Self {
            w_1: Matrix::zeros(self.w_1.rows(), self.w_1.cols()),
            w_2: Matrix::zeros(self.w_2.rows(), self.w_2.cols()),
            ..self.clone()
        }
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn p(&self) -> usize {
        self.w_q.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w_1.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, p, h) = (self.d(), self.p(), self.hidden());
        ensure!(d >= 1 && p >= 1 && h >= 1, "dimensions must be positive");
        for (name, m, r, c) in [
            ("W_K", &self.w_k, d, p),
            ("W_V", &self.w_v, d, p),
            ("W_O", &self.w_o, p, d),
            ("W_1", &self.w_1, h, d),
            ("W_2", &self.w_2, d, h),
        ] {
            ensure!(
                m.rows() == r && m.cols() == c,
                "{name} is {}x{}, expected {r}x{c}",
                m.rows(),
                m.cols()
            );
        }
        Ok(())
    }

    /// `F(a) = a + W_2 relu(W_1 a)`.
    pub fn mlp(&self, a: &Vector) -> Result<Vector> {
        let hidden = self.w_1.matvec(a)?.relu();
        a.add(&self.w_2.matvec(&hidden)?)
    }

    /// The MLP branch alone, `W_2 relu(W_1 a)`.
    pub fn mlp_branch(&self, a: &Vector) -> Result<Vector> {
        self.w_2.matvec(&self.w_1.matvec(a)?.relu())
    }

    /// `F(a)`, unit-normalized when `normalize_outputs` is set.
    pub fn emit(&self, a: &Vector) -> Result<Vector> {
        let y = self.mlp(a)?;
        if self.normalize_outputs {
            y.normalized()
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub next: Vector,
    /// Attention scores over `history[..t-1]`.
    pub scores: Vector,
    /// The attention output `a_t`.
    pub attention: Vector,
}

/// One step of the full-cache model on `history = x_1 .. x_t` (`t ≥ 2`).
pub fn step_reference(
    weights: &ToyModelWeights,
    history: &[Vector],
    scale_mode: ScaleMode,
) -> Result<StepOutput> {
    let t = history.len();
    ensure!(
        t >= 2,
        "a step needs the query plus at least one earlier token"
    );
    let d = weights.d();
    ensure!(
        history.iter().all(|x| x.len() == d),
        "history tokens must have length {d}"
    );
    let query = history[t - 1].vecmat(&weights.w_q)?;
    let scale = scale_mode.scale(t, weights.p());
    let mut logits = Vec::with_capacity(t - 1);
    let mut values = Vec::with_capacity(t - 1);
    for x in &history[..t - 1] {
        logits.push(scale * dot(&query, &x.vecmat(&weights.w_k)?));
        values.push(x.vecmat(&weights.w_v)?);
    }
    let scores = softmax(&logits)?;
    let mut mix = vec![0.0; weights.p()];
    for (s, v) in scores.iter().zip(&values) {
        for (m, x) in mix.iter_mut().zip(v.iter()) {
            *m += s * x;
        }
    }
    let attention = Vector::new(mix)?.vecmat(&weights.w_o)?;
    let next = weights.emit(&attention)?;
    Ok(StepOutput {
        next,
        scores,
        attention,
    })
}

/// One eviction, tagged with where and when it happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionRecord {
    /// Generation step (1-based); 0 while consuming the prompt.
    pub step: usize,
    /// Query position being processed when the eviction happened; the key
    /// is absent from this query's row onward.
    pub query_pos: usize,
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub counter: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRun {
    pub seed: Option<u64>,
    pub prompt_len: usize,
    /// Prompt followed by generated tokens.
    pub tokens: Vec<Vector>,
    /// One row per generated token, per (layer, head).
    pub trace: AttentionTrace,
    pub evictions: Vec<EvictionRecord>,
    /// Largest per-head cache occupancy at each generation step.
    pub occupancy: Vec<usize>,
    /// Largest occupancy each (layer, head) cache ever reached.
    pub peak_occupancy: Vec<usize>,
}

impl GenerationRun {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn steps(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn generated(&self) -> &[Vector] {
        &self.tokens[self.prompt_len..]
    }

    pub(crate) fn log_evictions(
        &mut self,
        out: &CompressOutcome,
        step: usize,
        query_pos: usize,
        layer: usize,
        head: usize,
    ) {
        self.evictions
            .extend(out.evicted.iter().map(|e| EvictionRecord {
                step,
                query_pos,
                layer,
                head,
                position: e.position,
                counter: e.counter,
            }));
    }
}

/// Per-step distance `‖x_t − x̃_t‖` over the generated tokens of two runs.
pub fn divergence(a: &GenerationRun, b: &GenerationRun) -> Result<Vec<f64>> {
    ensure!(
        a.prompt_len == b.prompt_len && a.tokens.len() == b.tokens.len(),
        "runs have different shapes"
    );
    a.generated()
        .iter()
        .zip(b.generated())
        .map(|(x, y)| Ok(x.sub(y)?.norm()))
        .collect()
}

fn check_prompt(weights: &ToyModelWeights, prompt: &[Vector], steps: usize) -> Result<()> {
    weights.validate()?;
    ensure!(
        prompt.iter().all(|x| x.len() == weights.d()),
        "prompt tokens must have length {}",
        weights.d()
    );
    ensure!(
        steps == 0 || prompt.len() >= 2,
        "generation needs a prompt of at least 2 tokens"
    );
    Ok(())
}

fn empty_run(prompt: &[Vector], heads: usize) -> GenerationRun {
    GenerationRun {
        seed: None,
        prompt_len: prompt.len(),
        tokens: prompt.to_vec(),
        trace: AttentionTrace::new(1, 1),
        evictions: Vec::new(),
        occupancy: Vec::new(),
        peak_occupancy: vec![0; heads],
    }
}

/// Autoregressive generation with the full history.
pub fn generate_reference(
    weights: &ToyModelWeights,
    prompt: &[Vector],
    steps: usize,
    scale_mode: ScaleMode,
) -> Result<GenerationRun> {
    check_prompt(weights, prompt, steps)?;
    let mut run = empty_run(prompt, 1);
    if steps == 0 {
        return Ok(run);
    }
    let n = prompt.len() + steps;
    for q in prompt.len() - 1..n - 1 {
        let out = step_reference(weights, &run.tokens[..=q], scale_mode)?;
        run.trace.push(0, 0, q, out.scores.into_inner())?;
        run.tokens.push(out.next);
        run.occupancy.push(q);
        run.peak_occupancy[0] = q;
    }
    Ok(run)
}

/// Autoregressive generation through a [`BudgetedKvCache`].
///
/// Prompt tokens are teacher-forced, but their queries still attend through
/// the cache so the importance record covers the prompt. Trace rows span all
/// attendable positions, with 0 for evicted keys.
pub fn generate_compressed(
    weights: &ToyModelWeights,
    prompt: &[Vector],
    steps: usize,
    cache_config: &CacheConfig,
    scale_mode: ScaleMode,
) -> Result<GenerationRun> {
    check_prompt(weights, prompt, steps)?;
    let mut cache = BudgetedKvCache::new(cache_config.clone(), weights.p())?;
    let mut run = empty_run(prompt, 1);
    if steps == 0 {
        return Ok(run);
    }
    let p_len = prompt.len();
    let n = p_len + steps;
    for q in 1..n - 1 {
        let generating = q + 1 >= p_len;
        let step = if generating { q + 2 - p_len } else { 0 };
        let prev = &run.tokens[q - 1];
        let (k, v) = (prev.vecmat(&weights.w_k)?, prev.vecmat(&weights.w_v)?);
        if let Some(out) = cache.append(k, v, q - 1)? {
            run.log_evictions(&out, step, q, 0, 0);
        }
        run.peak_occupancy[0] = run.peak_occupancy[0].max(cache.occupancy());
        let query = run.tokens[q].vecmat(&weights.w_q)?;
        let att = cache.attend(&query, scale_mode.scale(q + 1, weights.p()), q)?;
        if !generating {
            continue;
        }
        let a = att.output.vecmat(&weights.w_o)?;
        let next = weights.emit(&a)?;
        let mut row = vec![0.0; q];
        for (pos, s) in cache.positions().into_iter().zip(att.scores.iter()) {
            row[pos] = *s;
        }
        run.trace.push(0, 0, q, row)?;
        run.occupancy.push(cache.occupancy());
        run.tokens.push(next);
    }
    Ok(run)
}

/// How synthetic prompts are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Independent uniform draws on the unit sphere.
    #[default]
    Random,
    /// One unit vector repeated.
    Constant,
}

/// Unit-norm synthetic prompt. With `bias = Some((u, β))` each random token
/// is `normalize(z + β u)`.
pub fn synthetic_prompt(
    d: usize,
    len: usize,
    kind: PromptKind,
    bias: Option<(&Vector, f64)>,
    rng: &mut Rng,
) -> Result<Vec<Vector>> {
    ensure!(d >= 1, "token dimension must be positive");
    match kind {
        PromptKind::Constant => Ok(vec![Vector::filled(d, 1.0 / (d as f64).sqrt()); len]),
        PromptKind::Random => (0..len)
            .map(|_| {
                let z = rng.unit_vector(d);
                match bias {
                    None => Ok(z),
                    Some((u, beta)) => {
                        let mut y = z;
                        y.axpy(beta, u)?;
                        y.normalized()
                    }
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn model(seed: u64, d: usize) -> ToyModelWeights {
        ToyModelWeights::gaussian(d, d, 2 * d, &WeightInit::default(), &mut Rng::new(seed))
    }

    /// Straight-line evaluation of one step with explicit index loops.
    fn oracle_step(w: &ToyModelWeights, hist: &[Vector]) -> (Vec<f64>, Vec<f64>) {
        let t = hist.len();
        let (d, p, h) = (w.d(), w.p(), w.hidden());
        let row_times = |x: &Vector, m: &Matrix, cols: usize| -> Vec<f64> {
            (0..cols)
                .map(|j| (0..x.len()).map(|i| x[i] * m.get(i, j)).sum())
                .collect()
        };
        let q = row_times(&hist[t - 1], &w.w_q, p);
        let logits: Vec<f64> = hist[..t - 1]
            .iter()
            .map(|x| {
                let k = row_times(x, &w.w_k, p);
                (0..p).map(|i| q[i] * k[i]).sum::<f64>() / t as f64
            })
            .collect();
        let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let z: f64 = e.iter().sum();
        let alpha: Vec<f64> = e.iter().map(|x| x / z).collect();
        let mut xs = vec![0.0; d];
        for (a, x) in alpha.iter().zip(hist) {
            for i in 0..d {
                xs[i] += a * x[i];
            }
        }
        let xs = Vector::new(xs).unwrap();
        let v = Vector::new(row_times(&xs, &w.w_v, p)).unwrap();
        let a = row_times(&v, &w.w_o, d);
        let hidden: Vec<f64> = (0..h)
            .map(|r| (0..d).map(|c| w.w_1.get(r, c) * a[c]).sum::<f64>().max(0.0))
            .collect();
        let mut y: Vec<f64> = (0..d)
            .map(|r| a[r] + (0..h).map(|c| w.w_2.get(r, c) * hidden[c]).sum::<f64>())
            .collect();
        if w.normalize_outputs {
            let n = y.iter().map(|x| x * x).sum::<f64>().sqrt();
            y.iter_mut().for_each(|x| *x /= n);
        }
        (y, alpha)
    }

    #[test]
    fn zero_mlp_is_skip_connection() {
        let mut w = model(1, 6).without_mlp();
        w.normalize_outputs = false;
        let mut rng = Rng::new(2);
        let hist: Vec<Vector> = (0..5).map(|_| rng.unit_vector(6)).collect();
        let out = step_reference(&w, &hist, ScaleMode::InverseStep).unwrap();
        assert_eq!(out.next, out.attention);
    }

    #[test]
    fn repeated_history_attends_uniformly() {
        let w = model(3, 4);
        let x = Rng::new(4).unit_vector(4);
        let hist = vec![x.clone(); 6];
        let out = step_reference(&w, &hist, ScaleMode::InverseStep).unwrap();
        let expected = x.vecmat(&w.w_v).unwrap().vecmat(&w.w_o).unwrap();
        assert!(out.attention.max_abs_diff(&expected).unwrap() < 1e-14);
        assert!(out.scores.iter().all(|s| (s - 0.2).abs() < 1e-15));
    }

    #[test]
    fn step_matches_straight_line_oracle() {
        let w = model(42, 8);
        let mut rng = Rng::new(42);
        let mut hist: Vec<Vector> = (0..3).map(|_| rng.unit_vector(8)).collect();
        for _ in 0..8 {
            let out = step_reference(&w, &hist, ScaleMode::InverseStep).unwrap();
            let (y, alpha) = oracle_step(&w, &hist);
            for (a, b) in out.next.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in out.scores.iter().zip(&alpha) {
                assert!((a - b).abs() < 1e-12);
            }
            hist.push(out.next);
        }
    }

    #[test]
    fn step_errors() {
        let w = model(1, 4);
        assert!(step_reference(&w, &[Vector::zeros(4)], ScaleMode::InverseStep).is_err());
        assert!(step_reference(
            &w,
            &[Vector::zeros(4), Vector::zeros(3)],
            ScaleMode::InverseStep
        )
        .is_err());
    }

    #[test]
    fn zero_steps_returns_prompt() {
        let w = model(1, 4);
        let prompt = synthetic_prompt(4, 3, PromptKind::Random, None, &mut Rng::new(1)).unwrap();
        let run = generate_reference(&w, &prompt, 0, ScaleMode::InverseStep).unwrap();
        assert_eq!(run.tokens, prompt);
        assert!(run.trace.is_empty());
        let run = generate_compressed(
            &w,
            &prompt,
            0,
            &CacheConfig::with_budget(4),
            ScaleMode::InverseStep,
        )
        .unwrap();
        assert_eq!(run.tokens, prompt);
        assert!(run.trace.is_empty());
    }

    #[test]
    fn reference_rows_are_normalized() {
        let w = model(7, 8);
        let prompt = synthetic_prompt(8, 4, PromptKind::Random, None, &mut Rng::new(7)).unwrap();
        let run = generate_reference(&w, &prompt, 12, ScaleMode::InverseStep).unwrap();
        assert_eq!(run.tokens.len(), 16);
        let rows = run.trace.rows(0, 0).unwrap();
        assert_eq!(rows.len(), 12);
        for r in rows {
            assert_eq!(r.scores.len(), r.query_pos);
            assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for x in run.generated() {
            assert!((x.norm() - 1.0).abs() < 1e-12);
        }
        let again = generate_reference(&w, &prompt, 12, ScaleMode::InverseStep).unwrap();
        assert_eq!(run, again);
    }

    #[test]
    fn generation_matches_iterated_steps() {
        let w = model(5, 6);
        let prompt = synthetic_prompt(6, 2, PromptKind::Random, None, &mut Rng::new(5)).unwrap();
        let run = generate_reference(&w, &prompt, 10, ScaleMode::InverseStep).unwrap();
        let mut hist = prompt.clone();
        for _ in 0..10 {
            let out = step_reference(&w, &hist, ScaleMode::InverseStep).unwrap();
            hist.push(out.next);
        }
        assert_eq!(run.tokens, hist);
    }

    #[test]
    fn full_budget_matches_reference() {
        for seed in 0..5 {
            let w = model(seed, 8);
            let prompt =
                synthetic_prompt(8, 4, PromptKind::Random, None, &mut Rng::new(seed)).unwrap();
            let reference = generate_reference(&w, &prompt, 60, ScaleMode::InverseStep).unwrap();
            let cfg = CacheConfig::with_budget(64);
            let compressed =
                generate_compressed(&w, &prompt, 60, &cfg, ScaleMode::InverseStep).unwrap();
            assert!(compressed.evictions.is_empty());
            let div = divergence(&reference, &compressed).unwrap();
            assert!(div.iter().all(|&x| x <= 1e-12));
            assert_eq!(reference.trace, compressed.trace);
        }
    }

    #[test]
    fn minimal_budget_respects_occupancy() {
        let w = model(9, 8);
        let prompt = synthetic_prompt(8, 4, PromptKind::Random, None, &mut Rng::new(9)).unwrap();
        let cfg = CacheConfig {
            budget: 6,
            recent_window: 2,
            drop_amount: 4,
            ..CacheConfig::with_budget(6)
        };
        let run = generate_compressed(&w, &prompt, 80, &cfg, ScaleMode::InverseStep).unwrap();
        assert!(run.peak_occupancy[0] <= 6);
        assert!(run.occupancy.iter().all(|&o| o <= 6));
        assert!(!run.evictions.is_empty());
        for r in run.trace.rows(0, 0).unwrap() {
            assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_prompt() {
        let p = synthetic_prompt(4, 3, PromptKind::Constant, None, &mut Rng::new(0)).unwrap();
        assert!(p
            .iter()
            .all(|x| x == &p[0] && (x.norm() - 1.0).abs() < 1e-15));
    }
}
