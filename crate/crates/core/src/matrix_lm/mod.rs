//! The matrix language model: free context representations `H` and an LM
//! head `W` (or a factored head `A·B`), trained on a count matrix.
//!
//! Logits are `L = H·Wᵀ`, probabilities `P = σ(L)` row-wise and the loss is
//! `−(1/T)·⟨N, log P⟩_F`. All gradients below are exact and analytic.

mod checkpoint;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use train::{
    lr_at, train, Batching, OptimizerKind, Schedule, TrainConfig, TrainError, Trajectory, TrajectoryPoint,
    TrainingSet,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::corpus::CountMatrix;
use crate::linalg::{LinalgError, Matrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// The LM head: a full `V×D` matrix or a rank-`r` product `A·B`.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadWeights {
    Full { w: Matrix },
    Factored { a: Matrix, b: Matrix },
}

impl HeadWeights {
    pub fn full(w: Matrix) -> Self {
        HeadWeights::Full { w }
    }

    pub fn factored(a: Matrix, b: Matrix) -> Result<Self, ModelError> {
        if a.cols() != b.rows() {
            return Err(ModelError::Shape(format!(
                "factored head A is {:?} but B is {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if b.rows() > b.cols() {
            return Err(ModelError::Shape(format!(
                "head rank {} exceeds hidden size {}",
                b.rows(),
                b.cols()
            )));
        }
        Ok(HeadWeights::Factored { a, b })
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            HeadWeights::Full { w } => w.rows(),
            HeadWeights::Factored { a, .. } => a.rows(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            HeadWeights::Full { w } => w.cols(),
            HeadWeights::Factored { b, .. } => b.cols(),
        }
    }

    /// `None` for a full head.
    pub fn factor_rank(&self) -> Option<usize> {
        match self {
            HeadWeights::Full { .. } => None,
            HeadWeights::Factored { b, .. } => Some(b.rows()),
        }
    }

    /// The `V×D` head actually applied to hidden states.
    pub fn effective(&self) -> Matrix {
        match self {
            HeadWeights::Full { w } => w.clone(),
            HeadWeights::Factored { a, b } => a.matmul(b).expect("factored head shapes checked on construction"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub h: Matrix,
    pub head: HeadWeights,
}

impl ModelParams {
    pub fn new(h: Matrix, head: HeadWeights) -> Result<Self, ModelError> {
        if h.cols() != head.hidden_dim() {
            return Err(ModelError::Shape(format!(
                "H has {} columns but the head expects D = {}",
                h.cols(),
                head.hidden_dim()
            )));
        }
        Ok(Self { h, head })
    }

    /// Gaussian initialization with standard deviation `init_scale/√D`.
    ///
    /// A factored head draws `A` at that scale and `B` at `1/√r`, so `A·B`
    /// has the same entry variance as a full head.
    pub fn init(
        contexts: usize,
        vocab: usize,
        hidden: usize,
        head_rank: Option<usize>,
        init_scale: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = init_scale / (hidden as f64).sqrt();
        let mut gaussian = |rows, cols, std: f64| {
            Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
        };
        let h = gaussian(contexts, hidden, std);
        let head = match head_rank {
            None => HeadWeights::full(gaussian(vocab, hidden, std)),
            Some(r) => {
                let a = gaussian(vocab, r, std);
                let b = gaussian(r, hidden, 1.0 / (r as f64).sqrt());
                HeadWeights::factored(a, b)?
            }
        };
        Self::new(h, head)
    }

    pub fn contexts(&self) -> usize {
        self.h.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.head.vocab_size()
    }

    pub fn hidden_dim(&self) -> usize {
        self.h.cols()
    }

    fn check_counts(&self, counts: &CountMatrix) -> Result<(), ModelError> {
        if counts.vocab_size() != self.vocab_size() {
            return Err(ModelError::Shape(format!(
                "counts have V = {} but the head has V = {}",
                counts.vocab_size(),
                self.vocab_size()
            )));
        }
        if let Some(&bad) = counts.context_ids().iter().find(|&&id| id >= self.contexts()) {
            return Err(ModelError::Shape(format!(
                "count row for context {bad} but H has {} rows",
                self.contexts()
            )));
        }
        Ok(())
    }

    fn hidden_rows(&self, counts: &CountMatrix) -> Matrix {
        self.h.select_rows(counts.context_ids())
    }
}

/// `L = H·Wᵀ` for every row of `H`.
pub fn logits(params: &ModelParams) -> Matrix {
    match &params.head {
        HeadWeights::Full { w } => params.h.matmul_t(w),
        // H·Bᵀ·Aᵀ
        HeadWeights::Factored { a, b } => params.h.matmul_t(b).and_then(|hb| hb.matmul_t(a)),
    }
    .expect("parameter shapes checked on construction")
}

/// Probabilities and loss on the rows of a count matrix.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `P` restricted to the count rows.
    pub probs: Matrix,
    pub loss: f64,
    pub max_abs_logit: f64,
}

/// Loss `−(1/T)⟨N, log σ(L)⟩` for logits aligned with the count rows;
/// zero-count entries contribute exactly 0.
pub fn forward_from_logits(counts: &CountMatrix, logits: Matrix) -> Forward {
    let max_abs_logit = logits.max_abs();
    let mut probs = logits;
    let mut acc = 0.0;
    for i in 0..counts.rows() {
        let row = probs.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let mut row_acc = 0.0;
        for (j, x) in row.iter_mut().enumerate() {
            let shifted = *x - max;
            let c = counts.count(i, j);
            if c > 0 {
                row_acc += f64::from(c) * shifted;
            }
            *x = shifted.exp();
            z += *x;
        }
        // Σ_j N_ij · (l_ij − lse_i) with lse_i = max + ln z
        acc += row_acc - counts.row_total(i) as f64 * z.ln();
        let inv = 1.0 / z;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
    Forward {
        probs,
        loss: -acc / counts.total() as f64,
        max_abs_logit,
    }
}

pub fn forward(counts: &CountMatrix, params: &ModelParams) -> Result<Forward, ModelError> {
    params.check_counts(counts)?;
    let h = params.hidden_rows(counts);
    let w = params.head.effective();
    let l = h.matmul_t(&w)?;
    Ok(forward_from_logits(counts, l))
}

pub fn loss(counts: &CountMatrix, params: &ModelParams) -> Result<f64, ModelError> {
    Ok(forward(counts, params)?.loss)
}

/// `diag(ω)(P − Ñ)`: the gradient of the loss with respect to the logits.
pub fn logit_gradient(counts: &CountMatrix, probs: &Matrix) -> Result<Matrix, ModelError> {
    if probs.shape() != counts.normalized().shape() {
        return Err(ModelError::Shape(format!(
            "P is {:?} but counts are {:?}",
            probs.shape(),
            counts.normalized().shape()
        )));
    }
    let mut g = probs.sub(counts.normalized())?;
    for (i, &w) in counts.weights().iter().enumerate() {
        for x in g.row_mut(i) {
            *x *= w;
        }
    }
    Ok(g)
}

/// Gradients of the head parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadGradients {
    Full { w: Matrix },
    Factored { a: Matrix, b: Matrix },
}

impl HeadGradients {
    /// Gradient with respect to the effective head `W`, when full.
    pub fn full_w(&self) -> Option<&Matrix> {
        match self {
            HeadGradients::Full { w } => Some(w),
            HeadGradients::Factored { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGradients {
    /// Rows aligned with the count rows (`context_ids`).
    pub h: Matrix,
    pub head: HeadGradients,
    /// `diag(ω)(P − Ñ)`
    pub logits: Matrix,
    pub loss: f64,
}

/// Exact gradients: `∇_H = G·W`, `∇_W = Gᵀ·H`, and for `W = A·B`,
/// `∇_A = ∇_W·Bᵀ`, `∇_B = Aᵀ·∇_W`, with `G = diag(ω)(P − Ñ)`.
pub fn param_gradients(counts: &CountMatrix, params: &ModelParams) -> Result<ParamGradients, ModelError> {
    params.check_counts(counts)?;
    let h = params.hidden_rows(counts);
    let w = params.head.effective();
    let fwd = forward_from_logits(counts, h.matmul_t(&w)?);
    let g = logit_gradient(counts, &fwd.probs)?;
    let grad_h = g.matmul(&w)?;
    let grad_w = g.t_matmul(&h)?;
    let head = match &params.head {
        HeadWeights::Full { .. } => HeadGradients::Full { w: grad_w },
        HeadWeights::Factored { a, b } => HeadGradients::Factored {
            a: grad_w.matmul_t(b)?,
            b: a.t_matmul(&grad_w)?,
        },
    };
    Ok(ParamGradients {
        h: grad_h,
        head,
        logits: g,
        loss: fwd.loss,
    })
}

/// Which parameter groups take part in a gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateMask {
    pub hidden: bool,
    pub head: bool,
}

impl UpdateMask {
    pub const BOTH: UpdateMask = UpdateMask {
        hidden: true,
        head: true,
    };
    pub const HIDDEN_ONLY: UpdateMask = UpdateMask {
        hidden: true,
        head: false,
    };
}

/// First-order change of the logits per unit learning rate,
/// `Δ = −(∇_H·Wᵀ + H·∇_Wᵀ)` (terms dropped per `mask`), on the count rows.
pub fn analytic_logit_update(
    counts: &CountMatrix,
    params: &ModelParams,
    mask: UpdateMask,
) -> Result<Matrix, ModelError> {
    let grads = param_gradients(counts, params)?;
    let h = params.hidden_rows(counts);
    let w = params.head.effective();
    let mut delta = Matrix::zeros(counts.rows(), params.vocab_size());
    if mask.hidden {
        delta.add_scaled(-1.0, &grads.h.matmul_t(&w)?)?;
    }
    if mask.head {
        // first-order change of the effective head
        let dw = match (&params.head, &grads.head) {
            (HeadWeights::Full { .. }, HeadGradients::Full { w }) => w.clone(),
            (HeadWeights::Factored { a, b }, HeadGradients::Factored { a: ga, b: gb }) => {
                ga.matmul(b)?.add(&a.matmul(gb)?)?
            }
            _ => unreachable!("gradient variant follows the head variant"),
        };
        delta.add_scaled(-1.0, &h.matmul_t(&dw)?)?;
    }
    Ok(delta)
}

/// `(L(θ − η∇) − L(θ))/η` on the count rows.
pub fn exact_logit_update(
    counts: &CountMatrix,
    params: &ModelParams,
    lr: f64,
    mask: UpdateMask,
) -> Result<Matrix, ModelError> {
    let grads = param_gradients(counts, params)?;
    let h = params.hidden_rows(counts);
    let before = h.matmul_t(&params.head.effective())?;
    let mut h_next = h;
    if mask.hidden {
        h_next.add_scaled(-lr, &grads.h)?;
    }
    let w_next = if mask.head {
        match (&params.head, &grads.head) {
            (HeadWeights::Full { w }, HeadGradients::Full { w: gw }) => {
                let mut w = w.clone();
                w.add_scaled(-lr, gw)?;
                w
            }
            (HeadWeights::Factored { a, b }, HeadGradients::Factored { a: ga, b: gb }) => {
                let mut a = a.clone();
                let mut b = b.clone();
                a.add_scaled(-lr, ga)?;
                b.add_scaled(-lr, gb)?;
                a.matmul(&b)?
            }
            _ => unreachable!("gradient variant follows the head variant"),
        }
    } else {
        params.head.effective()
    };
    let after = h_next.matmul_t(&w_next)?;
    Ok(after.sub(&before)?.scale(1.0 / lr))
}

/// Analytic and finite-step rescaled logit updates.
#[derive(Debug, Clone)]
pub struct LogitUpdate {
    pub analytic: Matrix,
    pub exact: Matrix,
}

pub fn first_order_logit_update(
    counts: &CountMatrix,
    params: &ModelParams,
    lr: f64,
    mask: UpdateMask,
) -> Result<LogitUpdate, ModelError> {
    Ok(LogitUpdate {
        analytic: analytic_logit_update(counts, params, mask)?,
        exact: exact_logit_update(counts, params, lr, mask)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Top1 {
    /// Fraction of tokens (contexts weighted by `ω`).
    pub weighted: f64,
    /// Fraction of distinct contexts.
    pub unweighted: f64,
}

fn argmax_f64(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// Agreement between `argmax P_i` and `argmax Ñ_i`, lowest id on ties.
pub fn top1_from_probs(counts: &CountMatrix, probs: &Matrix) -> Top1 {
    let mut weighted = 0.0;
    let mut hits = 0usize;
    for i in 0..counts.rows() {
        if argmax_f64(probs.row(i)) == counts.row_argmax(i) {
            weighted += counts.weights()[i];
            hits += 1;
        }
    }
    Top1 {
        weighted,
        unweighted: hits as f64 / counts.rows() as f64,
    }
}

pub fn top1_accuracy(counts: &CountMatrix, params: &ModelParams) -> Result<Top1, ModelError> {
    Ok(top1_from_probs(counts, &forward(counts, params)?.probs))
}

/// Logits that reproduce `Ñ_smoothed = (1−δ)Ñ + δ/V` exactly under softmax.
pub fn smoothed_target_logits(counts: &CountMatrix, delta: f64) -> Matrix {
    let v = counts.vocab_size() as f64;
    counts.normalized().map(|p| ((1.0 - delta) * p + delta / v).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_counts, Corpus};
    use crate::linalg::{qr_rank, softmax_rows, DEFAULT_RANK_TOL};

    fn toy_counts() -> CountMatrix {
        let counts = vec![
            3, 1, 0, 0, //
            0, 2, 2, 1, //
            0, 0, 0, 5,
        ];
        CountMatrix::from_counts(4, counts, vec![0, 1, 2]).unwrap()
    }

    #[test]
    fn zero_hidden_gives_zero_logits() {
        let mut p = ModelParams::init(3, 4, 2, None, 1.0, 0).unwrap();
        p.h = Matrix::zeros(3, 2);
        assert_eq!(logits(&p).max_abs(), 0.0);
    }

    #[test]
    fn factored_matches_full_product() {
        let p = ModelParams::init(5, 7, 4, Some(2), 1.0, 3).unwrap();
        let full = ModelParams::new(p.h.clone(), HeadWeights::full(p.head.effective())).unwrap();
        let d = logits(&p).sub(&logits(&full)).unwrap();
        assert!(d.max_abs() < 1e-12);
    }

    #[test]
    fn logits_match_entrywise_dots() {
        let p = ModelParams::init(4, 6, 3, None, 1.0, 9).unwrap();
        let l = logits(&p);
        let HeadWeights::Full { w } = &p.head else { unreachable!() };
        for i in 0..4 {
            for j in 0..6 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += p.h[(i, k)] * w[(j, k)];
                }
                assert!((l[(i, j)] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let n = toy_counts();
        let p = ModelParams::init(3, 4, 2, None, 2.0, 1).unwrap();
        let l = logits(&p);
        // direct per-token sum of −log σ(l)_w
        let mut acc = 0.0;
        for i in 0..3 {
            let z: f64 = (0..4).map(|j| l[(i, j)].exp()).sum();
            for j in 0..4 {
                for _ in 0..n.count(i, j) {
                    acc -= (l[(i, j)].exp() / z).ln();
                }
            }
        }
        let expected = acc / 14.0;
        assert!((loss(&n, &p).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_at_smoothed_target_hits_floor() {
        let n = toy_counts();
        let fwd = forward_from_logits(&n, smoothed_target_logits(&n, 1e-6));
        // δ = 1e-6 moves the loss by O(δ) above the floor
        assert!((fwd.loss - n.entropy_floor()).abs() < 1e-5);
        assert!(fwd.loss >= n.entropy_floor());
        // interior targets make the equality exact
        let interior = CountMatrix::from_counts(3, vec![1, 2, 3, 4, 4, 1], vec![0, 1]).unwrap();
        let fwd = forward_from_logits(&interior, smoothed_target_logits(&interior, 0.0));
        assert!((fwd.loss - interior.entropy_floor()).abs() < 1e-10);
    }

    #[test]
    fn large_margin_gives_tiny_loss() {
        let n = CountMatrix::from_counts(3, vec![0, 4, 0], vec![0]).unwrap();
        let l = Matrix::from_rows(&[vec![0.0, 50.0, 0.0]]).unwrap();
        assert!(forward_from_logits(&n, l).loss < 1e-20);
    }

    #[test]
    fn logit_gradient_rows_sum_to_zero() {
        let n = toy_counts();
        assert_eq!(logit_gradient(&n, n.normalized()).unwrap().max_abs(), 0.0);
        let p = ModelParams::init(3, 4, 3, None, 1.0, 2).unwrap();
        let g = logit_gradient(&n, &softmax_rows(&logits(&p))).unwrap();
        for i in 0..3 {
            assert!(g.row(i).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_gradient_rank_is_bounded_by_head() {
        let c = crate::corpus::gen_zipf_bigram(12, 1.0, 30, 8, 1).unwrap();
        let (_, n) = build_counts(&c, 2).unwrap();
        let p = ModelParams::init(n.rows(), 12, 3, None, 1.0, 5).unwrap();
        let g = param_gradients(&n, &p).unwrap();
        let HeadWeights::Full { w } = &p.head else { unreachable!() };
        assert!(qr_rank(&g.h, DEFAULT_RANK_TOL) <= qr_rank(w, DEFAULT_RANK_TOL));
    }

    #[test]
    fn rank_two_d_bound_and_hidden_only_update() {
        let c = crate::corpus::gen_zipf_bigram(16, 1.0, 40, 10, 4).unwrap();
        let (_, n) = build_counts(&c, 2).unwrap();
        let p = ModelParams::init(n.rows(), 16, 3, None, 1.0, 6).unwrap();
        let delta = analytic_logit_update(&n, &p, UpdateMask::BOTH).unwrap();
        assert!(qr_rank(&delta, 1e-8) <= 6);
        let hidden_only = analytic_logit_update(&n, &p, UpdateMask::HIDDEN_ONLY).unwrap();
        let g = param_gradients(&n, &p).unwrap();
        let expected = g.h.matmul_t(&p.head.effective()).unwrap().scale(-1.0);
        assert_eq!(hidden_only, expected);
        let exact = exact_logit_update(&n, &p, 0.5, UpdateMask::HIDDEN_ONLY).unwrap();
        assert!(exact.sub(&expected).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn top1_cases() {
        let n = CountMatrix::from_counts(3, vec![5, 2, 1, 1, 1, 6], vec![0, 1]).unwrap();
        let t = top1_from_probs(&n, n.normalized());
        assert_eq!((t.weighted, t.unweighted), (1.0, 1.0));
        let reversed = n.normalized().scale(-1.0);
        let t = top1_from_probs(&n, &softmax_rows(&reversed));
        assert_eq!((t.weighted, t.unweighted), (0.0, 0.0));
        // only the first row right: weight 8/16
        let probs = Matrix::from_rows(&[vec![0.6, 0.2, 0.2], vec![0.5, 0.3, 0.2]]).unwrap();
        let t = top1_from_probs(&n, &probs);
        assert_eq!((t.weighted, t.unweighted), (0.5, 0.5));
    }

    #[test]
    fn shape_errors_are_reported() {
        let n = toy_counts();
        let p = ModelParams::init(2, 4, 2, None, 1.0, 0).unwrap();
        assert!(loss(&n, &p).is_err());
        let p = ModelParams::init(3, 5, 2, None, 1.0, 0).unwrap();
        assert!(param_gradients(&n, &p).is_err());
        let a = Matrix::zeros(4, 3);
        let b = Matrix::zeros(3, 2);
        assert!(HeadWeights::factored(a, b).is_err());
    }

    #[test]
    fn corpus_loss_equals_per_token_average() {
        let c = Corpus::new(3, vec![vec![0, 1, 2, 1], vec![2, 2, 0]], 0).unwrap();
        let (table, n) = build_counts(&c, 1).unwrap();
        let p = ModelParams::init(n.rows(), 3, 2, None, 1.5, 4).unwrap();
        let l = logits(&p);
        let mut acc = 0.0;
        for seq in c.sequences() {
            for t in 0..seq.len() {
                let ctx = table.get(&seq[t.saturating_sub(1)..t]).unwrap();
                let row = l.row(ctx);
                let lse = crate::linalg::logsumexp(row);
                acc += lse - row[seq[t] as usize];
            }
        }
        assert!((loss(&n, &p).unwrap() - acc / 7.0).abs() < 1e-12);
    }
}
