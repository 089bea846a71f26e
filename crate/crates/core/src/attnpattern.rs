//! Layer-wise KV compression patterns and the search that finds them.
//!
//! A compressed layer keeps only the attention-sink tokens (the earliest
//! positions) and the recent tokens (the trailing window) in its KV
//! cache. The reference dense and sparse attention paths here exist to
//! validate that machinery, not to be fast. On top sits an additive
//! per-layer latency model and a genetic search over binary per-layer
//! patterns that minimizes latency subject to an accuracy threshold,
//! with accuracy supplied by a pluggable oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

// ─── Sparse index set ─────────────────────────────────────────────────────────

/// Token indices retained by a compressed layer: the first `sink` and the
/// last `recent` positions of a length-`total` sequence, 1-based,
/// deduplicated when the regions overlap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseIndexSet {
    total: usize,
    sink: usize,
    recent: usize,
    indices: Vec<usize>,
}

impl SparseIndexSet {
    pub fn total(&self) -> usize {
        self.total
    }

    /// Sorted 1-based indices.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Retained token count for a sequence of length `m` under the same
    /// sink/recent settings (used by cost models without materializing
    /// the set).
    pub fn retained_for(sink: usize, recent: usize, m: usize) -> usize {
        m.min(sink) + m.saturating_sub(sink).min(recent)
    }
}

/// Build the sink ∪ recent index set for a length-`total` sequence.
pub fn build_sparse_index_set(
    total: usize,
    n_sink: usize,
    n_recent: usize,
) -> Result<SparseIndexSet> {
    if total == 0 {
        return Err(Error::invalid("sequence length must be >= 1"));
    }
    let mut indices: Vec<usize> = (1..=n_sink.min(total)).collect();
    let recent_start = (total + 1).saturating_sub(n_recent).max(1);
    for i in recent_start..=total {
        if indices.last().is_none_or(|&last| i > last) {
            indices.push(i);
        }
    }
    Ok(SparseIndexSet { total, sink: n_sink, recent: n_recent, indices })
}

// ─── Reference attention ──────────────────────────────────────────────────────

/// Dense row-major matrix, just big enough for the reference paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::invalid("matrix must be non-empty"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::invalid("matrix rows have ragged lengths"));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn softmax_rows_times_v<T: Scalar>(
    queries: &Matrix<T>,
    keys: &[&[T]],
    values: &[&[T]],
) -> Matrix<T> {
    let d = queries.cols();
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    let m = keys.len();
    let dv = values[0].len();
    let mut out = vec![T::zero(); queries.rows() * dv];
    let mut logits = vec![T::zero(); m];
    for qi in 0..queries.rows() {
        let q = queries.row(qi);
        let mut max_logit = T::neg_infinity();
        for (j, key) in keys.iter().enumerate() {
            let mut dot = T::zero();
            for k in 0..d {
                dot = dot + q[k] * key[k];
            }
            let l = dot * scale;
            logits[j] = l;
            if l > max_logit {
                max_logit = l;
            }
        }
        let mut denom = T::zero();
        for l in logits.iter_mut() {
            *l = (*l - max_logit).exp();
            denom = denom + *l;
        }
        for (j, value) in values.iter().enumerate() {
            let w = logits[j] / denom;
            for c in 0..dv {
                out[qi * dv + c] = out[qi * dv + c] + w * value[c];
            }
        }
    }
    Matrix { rows: queries.rows(), cols: dv, data: out }
}

fn check_attention_shapes<T: Scalar>(
    queries: &Matrix<T>,
    keys: &Matrix<T>,
    values: &Matrix<T>,
) -> Result<()> {
    if queries.cols() != keys.cols() {
        return Err(Error::invalid(format!(
            "query dim {} != key dim {}",
            queries.cols(),
            keys.cols()
        )));
    }
    if keys.rows() != values.rows() {
        return Err(Error::invalid(format!(
            "{} keys vs {} values",
            keys.rows(),
            values.rows()
        )));
    }
    Ok(())
}

/// Row-wise `softmax(Q Kᵀ / √d) V` with max-subtraction for stability.
pub fn dense_attention<T: Scalar>(
    queries: &Matrix<T>,
    keys: &Matrix<T>,
    values: &Matrix<T>,
) -> Result<Matrix<T>> {
    check_attention_shapes(queries, keys, values)?;
    let key_rows: Vec<&[T]> = (0..keys.rows()).map(|j| keys.row(j)).collect();
    let value_rows: Vec<&[T]> = (0..values.rows()).map(|j| values.row(j)).collect();
    Ok(softmax_rows_times_v(queries, &key_rows, &value_rows))
}

/// Dense attention restricted to the rows of K and V named by `idx`.
pub fn sparse_attention<T: Scalar>(
    queries: &Matrix<T>,
    keys: &Matrix<T>,
    values: &Matrix<T>,
    idx: &SparseIndexSet,
) -> Result<Matrix<T>> {
    check_attention_shapes(queries, keys, values)?;
    if idx.is_empty() {
        return Err(Error::invalid("sparse attention needs a non-empty index set"));
    }
    if idx.total() != keys.rows() {
        return Err(Error::invalid(format!(
            "index set built for {} tokens, keys have {}",
            idx.total(),
            keys.rows()
        )));
    }
    let key_rows: Vec<&[T]> = idx.indices().iter().map(|&i| keys.row(i - 1)).collect();
    let value_rows: Vec<&[T]> = idx.indices().iter().map(|&i| values.row(i - 1)).collect();
    Ok(softmax_rows_times_v(queries, &key_rows, &value_rows))
}

// ─── Compression pattern and latency model ────────────────────────────────────

/// Binary per-layer compression choices. Serializes as a bit-string such
/// as `"11000100"`, layer 0 first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CompressionPattern {
    bits: Vec<bool>,
}

impl CompressionPattern {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::invalid("pattern must cover at least one layer"));
        }
        Ok(Self { bits })
    }

    pub fn uncompressed(layers: usize) -> Result<Self> {
        Self::new(vec![false; layers])
    }

    pub fn all_compressed(layers: usize) -> Result<Self> {
        Self::new(vec![true; layers])
    }

    pub fn layers(&self) -> usize {
        self.bits.len()
    }

    #[inline]
    pub fn is_compressed(&self, layer: usize) -> bool {
        self.bits[layer]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn compressed_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

impl std::fmt::Display for CompressionPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.bit_string())
    }
}

impl std::str::FromStr for CompressionPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits: Result<Vec<bool>> = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::invalid(format!("pattern bit '{other}' is not 0/1"))),
            })
            .collect();
        Self::new(bits?)
    }
}

impl TryFrom<String> for CompressionPattern {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CompressionPattern> for String {
    fn from(p: CompressionPattern) -> Self {
        p.bit_string()
    }
}

/// Additive per-layer latency: a compressed layer costs strictly less
/// than its full counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
#[serde(try_from = "LatencyModelJson<T>", into = "LatencyModelJson<T>")]
pub struct LatencyModel<T = f64> {
    full: Vec<T>,
    compressed: Vec<T>,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(bound = "T: Serialize + serde::de::DeserializeOwned")]
struct LatencyModelJson<T> {
    full: Vec<T>,
    compressed: Vec<T>,
}

impl<T: Scalar> TryFrom<LatencyModelJson<T>> for LatencyModel<T> {
    type Error = Error;

    fn try_from(j: LatencyModelJson<T>) -> Result<Self> {
        LatencyModel::new(j.full, j.compressed)
    }
}

impl<T: Scalar> From<LatencyModel<T>> for LatencyModelJson<T> {
    fn from(m: LatencyModel<T>) -> Self {
        Self { full: m.full, compressed: m.compressed }
    }
}

impl<T: Scalar> LatencyModel<T> {
    pub fn new(full: Vec<T>, compressed: Vec<T>) -> Result<Self> {
        if full.is_empty() || full.len() != compressed.len() {
            return Err(Error::InvalidParameter(
                "latency model needs matching non-empty cost vectors".into(),
            ));
        }
        for l in 0..full.len() {
            if !full[l].is_finite() || !compressed[l].is_finite() || compressed[l] < T::zero() {
                return Err(Error::InvalidParameter(format!("non-finite cost at layer {l}")));
            }
            if compressed[l] >= full[l] {
                return Err(Error::InvalidParameter(format!(
                    "layer {l}: compressed cost {} must be < full cost {}",
                    compressed[l], full[l]
                )));
            }
        }
        Ok(Self { full, compressed })
    }

    /// Uniform costs across `layers` layers.
    pub fn uniform(layers: usize, full: T, compressed: T) -> Result<Self> {
        Self::new(vec![full; layers], vec![compressed; layers])
    }

    pub fn layers(&self) -> usize {
        self.full.len()
    }

    /// Latency of the all-compressed pattern, the global minimum.
    pub fn lower_bound(&self) -> T {
        self.compressed.iter().fold(T::zero(), |acc, &c| acc + c)
    }

    /// Fraction of the all-full cost that `pattern` keeps (≤ 1).
    pub fn cost_factor(&self, pattern: &CompressionPattern) -> Result<T> {
        let total_full = self.full.iter().fold(T::zero(), |acc, &c| acc + c);
        Ok(pattern_latency(pattern, self)? / total_full)
    }
}

/// Σ over layers of the compressed or full per-layer cost.
pub fn pattern_latency<T: Scalar>(
    pattern: &CompressionPattern,
    model: &LatencyModel<T>,
) -> Result<T> {
    if pattern.layers() != model.layers() {
        return Err(Error::InvalidParameter(format!(
            "pattern covers {} layers, model {}",
            pattern.layers(),
            model.layers()
        )));
    }
    let mut total = T::zero();
    for l in 0..pattern.layers() {
        total = total + if pattern.is_compressed(l) { model.compressed[l] } else { model.full[l] };
    }
    Ok(total)
}

// ─── Fitness oracles ──────────────────────────────────────────────────────────

/// Accuracy of a pattern in [0, 1]. Must be deterministic for a fixed
/// pattern. Real deployments score a held-out dataset; the synthetic
/// oracles below stand in for that here.
pub trait FitnessOracle {
    fn evaluate(&self, pattern: &CompressionPattern) -> f64;
}

impl<F: Fn(&CompressionPattern) -> f64> FitnessOracle for F {
    fn evaluate(&self, pattern: &CompressionPattern) -> f64 {
        self(pattern)
    }
}

/// Every pattern scores the same accuracy.
pub struct ConstOracle(pub f64);

impl FitnessOracle for ConstOracle {
    fn evaluate(&self, _pattern: &CompressionPattern) -> f64 {
        self.0
    }
}

/// Full accuracy iff compression stays within an allowed layer subset;
/// each violation outside it degrades the score, which gives the search
/// a gradient toward feasibility.
pub struct SubsetOracle {
    allowed: Vec<bool>,
}

impl SubsetOracle {
    pub fn new(layers: usize, allowed_layers: &[usize]) -> Result<Self> {
        let mut allowed = vec![false; layers];
        for &l in allowed_layers {
            if l >= layers {
                return Err(Error::invalid(format!("allowed layer {l} out of range")));
            }
            allowed[l] = true;
        }
        Ok(Self { allowed })
    }

    pub fn from_mask(allowed: Vec<bool>) -> Self {
        Self { allowed }
    }
}

impl FitnessOracle for SubsetOracle {
    fn evaluate(&self, pattern: &CompressionPattern) -> f64 {
        let layers = self.allowed.len().min(pattern.layers());
        let violations = (0..layers)
            .filter(|&l| pattern.is_compressed(l) && !self.allowed[l])
            .count();
        if violations == 0 {
            1.0
        } else {
            (0.95 - 0.4 * violations as f64 / pattern.layers() as f64).max(0.0)
        }
    }
}

// ─── Genetic search ───────────────────────────────────────────────────────────

/// Genetic-search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    /// Per-bit mutation probability. Zero means "use the 1/L default".
    pub mutation_rate: f64,
    pub elitism: usize,
    /// Accuracy threshold τ. Patterns below it are infeasible.
    pub tau: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 32,
            generations: 200,
            crossover_rate: 0.9,
            mutation_rate: 0.0,
            elitism: 2,
            tau: 0.99,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::invalid("population must be >= 2"));
        }
        if self.elitism == 0 || self.elitism >= self.population {
            return Err(Error::invalid("elitism must be >= 1 and < population"));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(Error::invalid("crossover_rate outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::invalid("mutation_rate outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Scored {
    bits: Vec<bool>,
    accuracy: f64,
    latency: f64,
}

impl Scored {
    fn feasible(&self, tau: f64) -> bool {
        self.accuracy >= tau
    }
}

/// Feasible-first lexicographic ranking: a feasible pattern beats any
/// infeasible one; among feasible, lower latency wins; among infeasible,
/// higher accuracy wins. Remaining ties break on the bit-string so the
/// ordering is total and runs are reproducible.
fn rank(a: &Scored, b: &Scored, tau: f64) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    match (a.feasible(tau), b.feasible(tau)) {
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (true, true) => a
            .latency
            .partial_cmp(&b.latency)
            .unwrap_or(Ordering::Equal)
            .then(b.accuracy.partial_cmp(&a.accuracy).unwrap_or(Ordering::Equal))
            .then(a.bits.cmp(&b.bits)),
        (false, false) => b
            .accuracy
            .partial_cmp(&a.accuracy)
            .unwrap_or(Ordering::Equal)
            .then(a.latency.partial_cmp(&b.latency).unwrap_or(Ordering::Equal))
            .then(a.bits.cmp(&b.bits)),
    }
}

/// Best individual found so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPattern {
    pub pattern: CompressionPattern,
    pub accuracy: f64,
    pub latency: f64,
}

/// Per-generation progress, one CSV row each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_acc: f64,
    pub best_latency: f64,
    pub feasible_count: usize,
}

/// Search outcome: `best` is `None` when no pattern ever met τ.
#[derive(Debug, Clone, PartialEq)]
pub struct GaOutcome {
    pub best: Option<BestPattern>,
    pub history: Vec<GenerationStats>,
    pub generations_run: usize,
    pub early_stopped: bool,
}

/// Evolve layer-wise compression patterns: seeded random population, then
/// per generation elitist survival, tournament-of-two selection, uniform
/// crossover, and per-bit mutation. Stops early only when a feasible
/// pattern provably reaches the latency lower bound (the all-compressed
/// cost). Infeasibility is a normal outcome, not an error.
pub fn ga_search(
    oracle: &dyn FitnessOracle,
    model: &LatencyModel<f64>,
    cfg: &GaConfig,
    layers: usize,
) -> Result<GaOutcome> {
    cfg.validate()?;
    if layers == 0 || layers != model.layers() {
        return Err(Error::invalid(format!(
            "search over {layers} layers with a {}-layer latency model",
            model.layers()
        )));
    }
    let mutation = if cfg.mutation_rate > 0.0 { cfg.mutation_rate } else { 1.0 / layers as f64 };
    let lower_bound = model.lower_bound();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let score = |bits: Vec<bool>| -> Result<Scored> {
        let pattern = CompressionPattern::new(bits.clone())?;
        let accuracy = oracle.evaluate(&pattern);
        let latency = pattern_latency(&pattern, model)?;
        Ok(Scored { bits, accuracy, latency })
    };

    let mut population: Vec<Scored> = Vec::with_capacity(cfg.population);
    for _ in 0..cfg.population {
        let bits: Vec<bool> = (0..layers).map(|_| rng.random_bool(0.5)).collect();
        population.push(score(bits)?);
    }

    let mut best_ever: Option<Scored> = None;
    let mut history = Vec::with_capacity(cfg.generations);
    let mut early_stopped = false;
    let mut generations_run = 0;

    for generation in 0..cfg.generations {
        generations_run = generation + 1;
        population.sort_by(|a, b| rank(a, b, cfg.tau));
        let gen_best = population[0].clone();
        let replace = match &best_ever {
            None => true,
            Some(current) => rank(&gen_best, current, cfg.tau) == std::cmp::Ordering::Less,
        };
        if replace {
            best_ever = Some(gen_best);
        }
        let best = best_ever.as_ref().expect("population is non-empty");
        history.push(GenerationStats {
            generation,
            best_acc: best.accuracy,
            best_latency: best.latency,
            feasible_count: population.iter().filter(|s| s.feasible(cfg.tau)).count(),
        });

        if best.feasible(cfg.tau) && best.latency <= lower_bound {
            early_stopped = true;
            break;
        }
        if generation + 1 == cfg.generations {
            break;
        }

        let mut next: Vec<Scored> = population[..cfg.elitism].to_vec();
        while next.len() < cfg.population {
            let tournament = |rng: &mut ChaCha8Rng| -> usize {
                let a = rng.random_range(0..population.len());
                let b = rng.random_range(0..population.len());
                if rank(&population[a], &population[b], cfg.tau) == std::cmp::Ordering::Greater {
                    b
                } else {
                    a
                }
            };
            let p1 = tournament(&mut rng);
            let p2 = tournament(&mut rng);
            let mut child: Vec<bool> = if rng.random_bool(cfg.crossover_rate) {
                (0..layers)
                    .map(|l| {
                        if rng.random_bool(0.5) {
                            population[p1].bits[l]
                        } else {
                            population[p2].bits[l]
                        }
                    })
                    .collect()
            } else {
                population[p1].bits.clone()
            };
            for bit in child.iter_mut() {
                if rng.random_bool(mutation) {
                    *bit = !*bit;
                }
            }
            next.push(score(child)?);
        }
        population = next;
    }

    let best = best_ever.filter(|s| s.feasible(cfg.tau)).map(|s| BestPattern {
        pattern: CompressionPattern::new(s.bits.clone()).expect("non-empty bits"),
        accuracy: s.accuracy,
        latency: s.latency,
    });
    Ok(GaOutcome { best, history, generations_run, early_stopped })
}

/// Exhaustive scan over all `2^layers` patterns: the optimality oracle
/// for the genetic search at desk scale.
pub fn exhaustive_pattern_scan(
    oracle: &dyn FitnessOracle,
    model: &LatencyModel<f64>,
    tau: f64,
    layers: usize,
) -> Result<Option<BestPattern>> {
    if layers == 0 || layers > 20 {
        return Err(Error::TooLarge(format!("cannot scan 2^{layers} patterns")));
    }
    let mut best: Option<BestPattern> = None;
    for mask in 0u32..(1u32 << layers) {
        let bits: Vec<bool> = (0..layers).map(|l| mask & (1 << l) != 0).collect();
        let pattern = CompressionPattern::new(bits)?;
        let accuracy = oracle.evaluate(&pattern);
        if accuracy < tau {
            continue;
        }
        let latency = pattern_latency(&pattern, model)?;
        let better = match &best {
            None => true,
            Some(b) => latency < b.latency,
        };
        if better {
            best = Some(BestPattern { pattern, accuracy, latency });
        }
    }
    Ok(best)
}
