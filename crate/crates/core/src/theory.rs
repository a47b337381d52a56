//! Brute-force verification of the bottleneck results on small instances.
//!
//! Every verifier is deterministic in its seed and records one margin per
//! instance. A nonnegative margin means the claimed bound held; the
//! worst margin is the minimum over tested instances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{batch_counts, build_counts, Corpus, CorpusError, CountMatrix};
use crate::linalg::{best_rank_k_residual, log_softmax_rows, qr_rank, singular_values, softmax_rows, LinalgError, Matrix};
use crate::matrix_lm::{analytic_logit_update, forward_from_logits, logits, HeadWeights, ModelError, ModelParams, UpdateMask};

/// Slack allowed below the entropy floor.
pub const GIBBS_SLACK: f64 = 1e-10;
/// Tolerance on `loss − floor` when the model reproduces the target.
pub const GIBBS_EQUALITY_TOL: f64 = 1e-8;
/// Smoothing used to make a target distribution strictly positive.
pub const SMOOTHING_DELTA: f64 = 1e-6;
/// Rank tolerance for the rank-`2D` upper bound on the logit update.
pub const UPDATE_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid verifier input: {0}")]
    Invalid(String),
    #[error("top-1 construction missed context {context}: |p − target| = {error}")]
    Top1Miss { context: usize, error: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub passed: bool,
    pub skipped: bool,
    pub margin: f64,
    /// Secondary measurement, its meaning depends on the verifier.
    pub aux: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub proposition: String,
    pub instances: usize,
    pub violations: usize,
    pub skipped: usize,
    pub worst_margin: f64,
    pub seed: u64,
    pub details: Vec<InstanceRecord>,
}

#[derive(Serialize)]
struct Summary<'a> {
    proposition: &'a str,
    instances: usize,
    violations: usize,
    skipped: usize,
    worst_margin: Option<f64>,
    seed: u64,
}

impl VerificationResult {
    fn from_records(proposition: &str, seed: u64, details: Vec<InstanceRecord>) -> Self {
        let tested = details.iter().filter(|r| !r.skipped);
        let worst_margin = tested.clone().map(|r| r.margin).fold(f64::INFINITY, f64::min);
        VerificationResult {
            proposition: proposition.to_string(),
            instances: tested.clone().count(),
            violations: tested.filter(|r| !r.passed).count(),
            skipped: details.iter().filter(|r| r.skipped).count(),
            worst_margin,
            seed,
            details,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    /// Summary object without the per-instance records.
    pub fn summary_json(&self) -> String {
        let s = Summary {
            proposition: &self.proposition,
            instances: self.instances,
            violations: self.violations,
            skipped: self.skipped,
            // JSON has no infinity; an empty run reports null
            worst_margin: self.worst_margin.is_finite().then_some(self.worst_margin),
            seed: self.seed,
        };
        serde_json::to_string(&s).expect("flat struct serializes")
    }

    pub fn details_csv(&self) -> String {
        let mut out = String::from("index,passed,skipped,margin,aux,note\n");
        for r in &self.details {
            let aux = r.aux.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.index,
                r.passed,
                r.skipped,
                r.margin,
                aux,
                r.note.replace(',', ";")
            ));
        }
        out
    }
}

/// Upper limits for randomly drawn instance sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDims {
    pub max_contexts: usize,
    pub max_vocab: usize,
    pub max_hidden: usize,
}

impl InstanceDims {
    fn check(&self, min_vocab: usize) -> Result<(), TheoryError> {
        if self.max_contexts == 0 || self.max_hidden == 0 || self.max_vocab < min_vocab {
            return Err(TheoryError::Invalid(format!("dims {self:?} too small")));
        }
        Ok(())
    }
}

fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Count matrix with entries in `0..=max_count`, about `zero_prob` of them
/// zero, and no empty row.
fn random_counts(c: usize, v: usize, max_count: u32, zero_prob: f64, rng: &mut ChaCha8Rng) -> CountMatrix {
    let mut counts = vec![0u32; c * v];
    for i in 0..c {
        let row = &mut counts[i * v..(i + 1) * v];
        for x in row.iter_mut() {
            if !rng.random_bool(zero_prob) {
                *x = rng.random_range(1..=max_count);
            }
        }
        if row.iter().all(|&x| x == 0) {
            row[rng.random_range(0..v)] = rng.random_range(1..=max_count);
        }
    }
    CountMatrix::from_counts(v, counts, (0..c).collect()).expect("rows are nonempty")
}

fn record(index: usize, margin: f64, passed: bool, aux: Option<f64>, note: String) -> InstanceRecord {
    InstanceRecord {
        index,
        passed,
        skipped: false,
        margin,
        aux,
        note,
    }
}

/// The loss never drops below the entropy floor and meets it when the
/// model reproduces the target.
///
/// Each trial draws a sparse count matrix and random parameters. Equality
/// is checked on a second, strictly positive count matrix with logits set to
/// the log of its smoothed normalized rows; with zeros in the target the
/// floor is only reached in the limit, so the smoothing error would be of
/// order `δ`, above the equality tolerance.
pub fn verify_gibbs(trials: usize, dims: InstanceDims, seed: u64) -> Result<VerificationResult, TheoryError> {
    if trials == 0 {
        return Err(TheoryError::Invalid("trials must be at least 1".into()));
    }
    dims.check(2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(trials);
    for index in 0..trials {
        let c = rng.random_range(1..=dims.max_contexts);
        let v = rng.random_range(2..=dims.max_vocab);
        let d = rng.random_range(1..=dims.max_hidden);
        let counts = random_counts(c, v, 5, 0.4, &mut rng);
        let scale = rng.random_range(0.1..5.0);
        let params = ModelParams::new(
            randn(c, d, scale, &mut rng),
            HeadWeights::full(randn(v, d, 1.0, &mut rng)),
        )?;
        let floor = counts.entropy_floor();
        let loss = forward_from_logits(&counts, logits(&params)).loss;
        let slack = loss - floor;

        let interior = random_counts(c, v, 5, 0.0, &mut rng);
        let target = crate::matrix_lm::smoothed_target_logits(&interior, SMOOTHING_DELTA);
        let gap = (forward_from_logits(&interior, target).loss - interior.entropy_floor()).abs();

        // margin: the tighter of the two normalized slacks
        let margin = (slack + GIBBS_SLACK).min(GIBBS_EQUALITY_TOL - gap);
        records.push(record(
            index,
            margin,
            slack >= -GIBBS_SLACK && gap < GIBBS_EQUALITY_TOL,
            Some(gap),
            format!("C={c} V={v} D={d}"),
        ));
    }
    Ok(VerificationResult::from_records("gibbs_floor", seed, records))
}

/// Rank of `H·Wᵀ` is at most `D`, rank of its row-wise log-softmax at most
/// `D + 1`. The margin is the smaller remaining headroom in rank units.
pub fn verify_rank_bounds(trials: usize, dims: InstanceDims, tol: f64, seed: u64) -> Result<VerificationResult, TheoryError> {
    if trials == 0 || tol <= 0.0 {
        return Err(TheoryError::Invalid("need trials ≥ 1 and tol > 0".into()));
    }
    dims.check(dims.max_hidden + 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(trials);
    for index in 0..trials {
        let d = rng.random_range(1..=dims.max_hidden);
        let v = rng.random_range(d + 3..=dims.max_vocab);
        // enough rows that the bound is not implied by the shape
        let c = rng.random_range((d + 2).min(dims.max_contexts)..=dims.max_contexts.max(d + 2));
        let scale = rng.random_range(0.3..3.0);
        let h = randn(c, d, scale, &mut rng);
        let w = randn(v, d, 1.0, &mut rng);
        let l = h.matmul_t(&w)?;
        let logit_rank = qr_rank(&l, tol);
        let logprob_rank = qr_rank(&log_softmax_rows(&l), tol);
        let margin = (d as f64 - logit_rank as f64).min((d + 1) as f64 - logprob_rank as f64);
        records.push(record(
            index,
            margin,
            margin >= 0.0,
            Some(logprob_rank as f64),
            format!("C={c} V={v} D={d} logit_rank={logit_rank} logprob_rank={logprob_rank}"),
        ));
    }
    Ok(VerificationResult::from_records("rank_bounds", seed, records))
}

/// Output of [`construct_top1`].
#[derive(Debug, Clone, PartialEq)]
pub struct Top1Construction {
    pub params: ModelParams,
    pub scales: Vec<f64>,
    /// `max_i |P_{i,a_i} − goal_i|` where `a_i` is the target argmax.
    pub max_error: f64,
    /// Set when some row needed the grid fallback.
    pub used_grid: bool,
}

/// Probability that `softmax(α·W·W_kᵀ)` puts on `k`, for unit-circle rows.
fn circle_top_prob(cosines: &[f64], alpha: f64) -> f64 {
    // cos(θ_j − θ_k) − 1 ≤ 0, so the sum is ≥ 1 and never overflows
    1.0 / cosines.iter().map(|&c| (alpha * (c - 1.0)).exp()).sum::<f64>()
}

/// Two-dimensional parameters whose top-1 probabilities match the target
/// rows to within `epsilon`.
///
/// `W` places the `V` tokens at equally spaced points of the unit circle.
/// Row `i` of `H` is `α_i` times the embedding of the target argmax `a_i`, so
/// the probability of `a_i` rises from `1/V` at `α = 0` towards 1. Targets
/// above `1 − ε/2` aim at `1 − ε/2`.
pub fn construct_top1(target: &CountMatrix, epsilon: f64) -> Result<Top1Construction, TheoryError> {
    let v = target.vocab_size();
    if epsilon.is_nan() || epsilon <= 0.0 || v < 2 {
        return Err(TheoryError::Invalid(format!("need epsilon > 0 and V ≥ 2, got {epsilon}, {v}")));
    }
    let angle = |k: usize| 2.0 * std::f64::consts::PI * k as f64 / v as f64;
    let w = Matrix::from_fn(v, 2, |k, j| if j == 0 { angle(k).cos() } else { angle(k).sin() });
    // cos of the angle between tokens depends only on the index difference
    let cosines: Vec<f64> = (0..v).map(|k| angle(k).cos()).collect();
    let tol = epsilon / 4.0;

    let mut scales = Vec::with_capacity(target.rows());
    let mut used_grid = false;
    for i in 0..target.rows() {
        let top = target.row_argmax(i);
        let goal = target.normalized()[(i, top)].min(1.0 - epsilon / 2.0);
        debug_assert!(goal >= 1.0 / v as f64 - 1e-12, "argmax mass is at least 1/V");
        if goal <= 1.0 / v as f64 + tol {
            scales.push(0.0);
            continue;
        }
        // geometric bracket
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut prev = circle_top_prob(&cosines, 0.0);
        let mut monotone = true;
        loop {
            let p = circle_top_prob(&cosines, hi);
            if p < prev {
                monotone = false;
                break;
            }
            if p >= goal || hi > 1e12 {
                break;
            }
            prev = p;
            lo = hi;
            hi *= 2.0;
        }
        let alpha = if monotone {
            let mut a = 0.5 * (lo + hi);
            for _ in 0..200 {
                a = 0.5 * (lo + hi);
                let p = circle_top_prob(&cosines, a);
                if (p - goal).abs() < tol / 4.0 {
                    break;
                }
                if p < goal {
                    lo = a;
                } else {
                    hi = a;
                }
            }
            a
        } else {
            used_grid = true;
            let steps = 100_000;
            (0..=steps)
                .map(|s| hi * s as f64 / steps as f64)
                .min_by(|&a, &b| {
                    let ea = (circle_top_prob(&cosines, a) - goal).abs();
                    let eb = (circle_top_prob(&cosines, b) - goal).abs();
                    ea.total_cmp(&eb)
                })
                .expect("grid is nonempty")
        };
        scales.push(alpha);
    }

    let h = Matrix::from_fn(target.rows(), 2, |i, j| scales[i] * w[(target.row_argmax(i), j)]);
    let params = ModelParams::new(h, HeadWeights::full(w))?;
    // check by direct evaluation, not through the closed form above
    let probs = softmax_rows(&logits(&params));
    let mut max_error: f64 = 0.0;
    for i in 0..target.rows() {
        let top = target.row_argmax(i);
        let err = (probs[(i, top)] - target.normalized()[(i, top)]).abs();
        if err >= epsilon {
            return Err(TheoryError::Top1Miss { context: i, error: err });
        }
        max_error = max_error.max(err);
    }
    Ok(Top1Construction {
        params,
        scales,
        max_error,
        used_grid,
    })
}

/// Runs [`construct_top1`] on random targets and records `ε − max_error`.
pub fn verify_top1(trials: usize, dims: InstanceDims, epsilon: f64, seed: u64) -> Result<VerificationResult, TheoryError> {
    if trials == 0 {
        return Err(TheoryError::Invalid("trials must be at least 1".into()));
    }
    dims.check(2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(trials);
    for index in 0..trials {
        let c = rng.random_range(1..=dims.max_contexts);
        let v = rng.random_range(2..=dims.max_vocab);
        let zero_prob = rng.random_range(0.0..0.95);
        let counts = random_counts(c, v, rng.random_range(1..=20), zero_prob, &mut rng);
        let (margin, passed, note) = match construct_top1(&counts, epsilon) {
            Ok(t) => {
                let w_rank = qr_rank(&t.params.head.effective(), crate::linalg::DEFAULT_RANK_TOL);
                (epsilon - t.max_error, w_rank <= 2, format!("C={c} V={v} grid={}", t.used_grid))
            }
            Err(TheoryError::Top1Miss { error, .. }) => (epsilon - error, false, format!("C={c} V={v} miss")),
            Err(e) => return Err(e),
        };
        records.push(record(index, margin, passed && margin > 0.0, None, note));
    }
    Ok(VerificationResult::from_records("top1_construction", seed, records))
}

/// A count matrix with a planted number of distinct unique continuations.
#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub counts: CountMatrix,
    /// Distinct tokens that are the only continuation of some context.
    pub unique_tokens: Vec<usize>,
    /// For each unique token, one context whose only continuation it is.
    pub unique_contexts: Vec<usize>,
}

impl PlantedInstance {
    /// `min(|unique tokens|, V − 1)`
    pub fn rank_bound(&self) -> usize {
        self.unique_tokens.len().min(self.counts.vocab_size() - 1)
    }
}

/// Plants `k` distinct unique continuations among `c ≥ k` contexts. The
/// other contexts either repeat one of the planted tokens as their only
/// continuation or have at least two continuations.
pub fn planted_instance(c: usize, v: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<PlantedInstance, TheoryError> {
    if v < 2 || k == 0 || k > v || c < k {
        return Err(TheoryError::Invalid(format!("cannot plant k={k} in C={c}, V={v}")));
    }
    let mut tokens: Vec<usize> = (0..v).collect();
    tokens.shuffle(rng);
    let planted = tokens[..k].to_vec();
    let mut rows: Vec<Vec<u32>> = Vec::with_capacity(c);
    for &t in &planted {
        let mut row = vec![0u32; v];
        row[t] = rng.random_range(1..=5);
        rows.push(row);
    }
    for _ in k..c {
        let mut row = vec![0u32; v];
        if rng.random_bool(0.3) {
            row[planted[rng.random_range(0..k)]] = rng.random_range(1..=5);
        } else {
            let support = rng.random_range(2..=v);
            let mut cols: Vec<usize> = (0..v).collect();
            cols.shuffle(rng);
            for &j in &cols[..support] {
                row[j] = rng.random_range(1..=5);
            }
        }
        rows.push(row);
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(rng);
    let mut position = vec![0; c];
    for (new, &old) in order.iter().enumerate() {
        position[old] = new;
    }
    let flat: Vec<u32> = order.iter().flat_map(|&old| rows[old].iter().copied()).collect();
    let counts = CountMatrix::from_counts(v, flat, (0..c).collect())?;
    Ok(PlantedInstance {
        counts,
        unique_tokens: planted,
        unique_contexts: (0..k).map(|old| position[old]).collect(),
    })
}

/// Random row-stochastic matrix with every entry in `(0, 1)`.
pub fn random_interior_probs(c: usize, v: usize, logit_scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    softmax_rows(&randn(c, v, logit_scale, rng))
}

/// Rank of a matrix from its singular values, same absolute tolerance as
/// the QR rank.
pub fn svd_rank(m: &Matrix, tol: f64) -> Result<usize, TheoryError> {
    Ok(singular_values(m)?.iter().filter(|&&s| s > tol).count())
}

/// Smallest singular value of the square block of `P − Ñ` on the planted
/// contexts (rows) and their tokens (columns).
fn planted_block_min_sv(inst: &PlantedInstance, probs: &Matrix) -> Result<f64, TheoryError> {
    let r = probs.sub(inst.counts.normalized())?;
    let block = r.select_rows(&inst.unique_contexts).select_cols(&inst.unique_tokens);
    Ok(singular_values(&block)?.last().copied().unwrap_or(0.0))
}

/// `rank(P − Ñ) ≥ min(#distinct unique continuations, V − 1)` for interior
/// `P`. The number of planted tokens cycles through `1..=V`. The margin is
/// `qr_rank − bound`; `aux` holds the smallest singular value of the planted
/// square block when fewer than `V` tokens are planted.
pub fn verify_rank_lower_bound(
    instances: usize,
    max_contexts: usize,
    max_vocab: usize,
    seed: u64,
) -> Result<VerificationResult, TheoryError> {
    if instances == 0 || max_vocab < 2 || max_contexts < max_vocab {
        return Err(TheoryError::Invalid("need instances ≥ 1, V ≥ 2 and C ≥ V".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(instances);
    for index in 0..instances {
        let v = rng.random_range(2..=max_vocab);
        let k = 1 + index % v;
        let c = rng.random_range(k..=max_contexts);
        let inst = planted_instance(c, v, k, &mut rng)?;
        let probs = random_interior_probs(c, v, rng.random_range(0.2..1.5), &mut rng);
        let r = probs.sub(inst.counts.normalized())?;
        let qr = qr_rank(&r, crate::linalg::DEFAULT_RANK_TOL);
        let sv = svd_rank(&r, crate::linalg::DEFAULT_RANK_TOL)?;
        let bound = inst.rank_bound();
        let aux = if k < v { Some(planted_block_min_sv(&inst, &probs)?) } else { None };
        let agree = qr.abs_diff(sv) <= 1;
        let block_ok = aux.is_none_or(|s| s > 0.0);
        records.push(record(
            index,
            qr as f64 - bound as f64,
            qr >= bound && sv >= bound && agree && block_ok,
            aux,
            format!("C={c} V={v} k={k} qr_rank={qr} svd_rank={sv}"),
        ));
    }
    Ok(VerificationResult::from_records("rank_lower_bound", seed, records))
}

/// Residual of the best rank-`2D` logit update against both versions of
/// the target error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualCheck {
    pub update_rank: usize,
    pub residual_unweighted: f64,
    pub bound_unweighted: f64,
    pub residual_weighted: f64,
    pub bound_weighted: f64,
}

impl ResidualCheck {
    pub fn margin(&self) -> f64 {
        (self.residual_unweighted - self.bound_unweighted).min(self.residual_weighted - self.bound_weighted)
    }
}

/// Compares the first-order logit update of `params` with `P − Ñ` and with
/// `diag(ω)(P − Ñ)`, each against its Eckart–Young tail beyond rank `2D`.
pub fn update_residual(counts: &CountMatrix, params: &ModelParams) -> Result<ResidualCheck, TheoryError> {
    let d = params.hidden_dim();
    let delta = analytic_logit_update(counts, params, UpdateMask::BOTH)?;
    let fwd = forward_from_logits(counts, logits(params).select_rows(counts.context_ids()));
    let r = fwd.probs.sub(counts.normalized())?;
    let mut rw = r.clone();
    for (i, &w) in counts.weights().iter().enumerate() {
        rw.row_mut(i).iter_mut().for_each(|x| *x *= w);
    }
    Ok(ResidualCheck {
        update_rank: qr_rank(&delta, UPDATE_RANK_TOL),
        residual_unweighted: delta.sub(&r)?.frobenius_norm(),
        bound_unweighted: best_rank_k_residual(&r, 2 * d)?,
        residual_weighted: delta.sub(&rw)?.frobenius_norm(),
        bound_weighted: best_rank_k_residual(&rw, 2 * d)?,
    })
}

/// No rank-`2D` first-order update reaches the target error: on planted
/// instances whose rank bound exceeds `2D`, `‖Δ − R‖_F` is strictly above the
/// tail and the tail is positive, under both conventions for `R`. Also checks
/// `rank(Δ) ≤ 2D`.
pub fn verify_update_residual(instances: usize, max_vocab: usize, seed: u64) -> Result<VerificationResult, TheoryError> {
    if instances == 0 || max_vocab < 4 {
        return Err(TheoryError::Invalid("need instances ≥ 1 and V ≥ 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(instances);
    for index in 0..instances {
        let v = rng.random_range(4..=max_vocab);
        // bound = min(k, V − 1) must exceed 2D
        let max_d = (v - 2) / 2;
        let d = rng.random_range(1..=max_d.clamp(1, 3));
        let k = rng.random_range(2 * d + 1..=v);
        let c = rng.random_range(k..=k + v);
        let inst = planted_instance(c, v, k, &mut rng)?;
        debug_assert!(inst.rank_bound() > 2 * d);
        let scale = rng.random_range(0.3..2.0);
        let params = ModelParams::new(randn(c, d, scale, &mut rng), HeadWeights::full(randn(v, d, 1.0, &mut rng)))?;
        let check = update_residual(&inst.counts, &params)?;
        let strict = check.residual_unweighted > check.bound_unweighted
            && check.residual_weighted > check.bound_weighted
            && check.bound_unweighted > 0.0
            && check.bound_weighted > 0.0;
        records.push(record(
            index,
            check.margin(),
            strict && check.update_rank <= 2 * d,
            Some(check.bound_unweighted),
            format!("C={c} V={v} D={d} k={k} update_rank={}", check.update_rank),
        ));
    }
    Ok(VerificationResult::from_records("update_residual", seed, records))
}

/// Disjoint-set forest for the connectivity check.
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }

    fn components(&mut self) -> usize {
        (0..self.parent.len()).filter(|&x| self.find(x) == x).count()
    }
}

/// Batch contexts with a single in-batch continuation but several in the
/// dataset, one per distinct in-batch token (lowest row first). Returns
/// `(batch row, token)` pairs.
pub fn batch_unique_contexts(dataset: &CountMatrix, batch: &CountMatrix) -> Vec<(usize, usize)> {
    let mut seen = vec![false; batch.vocab_size()];
    let mut out = Vec::new();
    for i in 0..batch.rows() {
        let ctx = batch.context_ids()[i];
        if batch.row_support(i) == 1 && dataset.row_support(ctx) >= 2 {
            let t = batch.row_argmax(i);
            if !seen[t] {
                seen[t] = true;
                out.push((i, t));
            }
        }
    }
    out
}

/// Whether the graph with an edge `c – c'` whenever context `c` continues
/// with `c'`'s token somewhere in the dataset is connected.
pub fn unique_contexts_connected(dataset: &CountMatrix, batch: &CountMatrix, unique: &[(usize, usize)]) -> bool {
    let mut uf = UnionFind::new(unique.len());
    for (a, &(row_a, _)) in unique.iter().enumerate() {
        let ctx = batch.context_ids()[row_a];
        for (b, &(_, tok_b)) in unique.iter().enumerate() {
            if a != b && dataset.count(ctx, tok_b) > 0 {
                uf.union(a, b);
            }
        }
    }
    uf.components() <= 1
}

/// Settings for the mini-batch rank check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdRankConfig {
    pub max_context_len: usize,
    /// Fraction of sequences in the batch.
    pub batch_fraction: f64,
    /// Interpolation weights toward uniform, ascending.
    pub delta_grid: Vec<f64>,
    /// Grid value at which the bound is asserted.
    pub assert_delta: f64,
}

impl Default for SgdRankConfig {
    fn default() -> Self {
        SgdRankConfig {
            max_context_len: 2,
            batch_fraction: 0.25,
            delta_grid: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0],
            assert_delta: 1e-3,
        }
    }
}

/// Outcome on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdRankOutcome {
    pub unique_contexts: usize,
    pub connected: bool,
    pub bound: usize,
    /// `(δ, rank)` for every grid value.
    pub ranks: Vec<(f64, usize)>,
    /// Largest grid value up to which the bound held throughout.
    pub largest_working_delta: Option<f64>,
    /// Largest grid value at which the bound held.
    pub largest_holding_delta: Option<f64>,
}

/// Rank of the in-batch error when the predictions are `δ`-close to the
/// dataset distribution: `P = (1 − δ)·Ñ + δ·uniform` on the batch contexts.
pub fn sgd_rank_on_batch(
    corpus: &Corpus,
    batch: &[usize],
    config: &SgdRankConfig,
) -> Result<SgdRankOutcome, TheoryError> {
    if config.delta_grid.is_empty() || config.delta_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TheoryError::Invalid("delta grid must be nonempty and ascending".into()));
    }
    let (table, dataset) = build_counts(corpus, config.max_context_len)?;
    let nb = batch_counts(corpus, &table, batch)?;
    let v = corpus.vocab_size();
    let unique = batch_unique_contexts(&dataset, &nb);
    let connected = unique_contexts_connected(&dataset, &nb, &unique);
    let bound = unique.len().min(v - 1);
    let target = dataset.normalized().select_rows(nb.context_ids());
    let mut ranks = Vec::with_capacity(config.delta_grid.len());
    let mut largest = None;
    let mut largest_holding = None;
    let mut holding = true;
    for &delta in &config.delta_grid {
        let p = target.map(|x| (1.0 - delta) * x + delta / v as f64);
        let rank = qr_rank(&p.sub(nb.normalized())?, crate::linalg::DEFAULT_RANK_TOL);
        holding &= rank >= bound;
        if holding {
            largest = Some(delta);
        }
        if rank >= bound {
            largest_holding = Some(delta);
        }
        ranks.push((delta, rank));
    }
    Ok(SgdRankOutcome {
        unique_contexts: unique.len(),
        connected,
        bound,
        ranks,
        largest_working_delta: largest,
        largest_holding_delta: largest_holding,
    })
}

/// Runs [`sgd_rank_on_batch`] on one random batch per corpus. Batches whose
/// unique contexts are not connected are skipped. A violation is a batch
/// where the bound fails at `assert_delta`. `aux` reports the largest grid
/// value at which the bound held.
pub fn verify_sgd_rank(corpora: &[Corpus], config: &SgdRankConfig, seed: u64) -> Result<VerificationResult, TheoryError> {
    if corpora.is_empty() || !(config.batch_fraction > 0.0 && config.batch_fraction <= 1.0) {
        return Err(TheoryError::Invalid("need corpora and batch fraction in (0, 1]".into()));
    }
    if !config.delta_grid.contains(&config.assert_delta) {
        return Err(TheoryError::Invalid("assert_delta must be on the delta grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(corpora.len());
    for (index, corpus) in corpora.iter().enumerate() {
        let n = corpus.num_sequences();
        let size = ((n as f64 * config.batch_fraction).round() as usize).clamp(1, n);
        let mut seqs: Vec<usize> = (0..n).collect();
        seqs.shuffle(&mut rng);
        let mut batch = seqs[..size].to_vec();
        batch.sort_unstable();
        let out = sgd_rank_on_batch(corpus, &batch, config)?;
        let note = format!("unique={} bound={} connected={}", out.unique_contexts, out.bound, out.connected);
        if !out.connected {
            records.push(InstanceRecord {
                index,
                passed: true,
                skipped: true,
                margin: 0.0,
                aux: out.largest_holding_delta,
                note,
            });
            continue;
        }
        let margin = out
            .ranks
            .iter()
            .find(|(d, _)| *d == config.assert_delta)
            .map(|&(_, r)| r as f64 - out.bound as f64)
            .expect("assert_delta is on the grid");
        records.push(record(index, margin, margin >= 0.0, out.largest_holding_delta, note));
    }
    Ok(VerificationResult::from_records("sgd_rank", seed, records))
}
