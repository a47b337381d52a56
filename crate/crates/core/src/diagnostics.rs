//! Measurements of how the LM head compresses the logit gradient.
//!
//! The part of a logit gradient `G` that lies in `ker(Wᵀ)` never reaches
//! `H` (since `∇_H = G·W`). These probes quantify that loss: empirical
//! gradient ranks, the lost-norm fraction, cosine alignment between `G` and
//! its visible part, sorted coefficient profiles and the loss decrease
//! obtained along the logit-optimal and the hidden-state directions.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CountMatrix;
use crate::linalg::{
    best_rank_k_residual, kernel_basis, norm, project_rows_onto_span, qr_rank, LinalgError, Matrix,
    DEFAULT_RANK_TOL,
};
use crate::matrix_lm::{forward, forward_from_logits, logit_gradient, HeadWeights, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("requested {requested} tokens but the counts hold {available}")]
    NotEnoughTokens { requested: usize, available: usize },
    #[error("token counts must be positive and ascending")]
    BadTokenCounts,
    #[error("gradient has {got} columns, head has V = {expected}")]
    VocabMismatch { expected: usize, got: usize },
    #[error("all gradient rows are zero")]
    ZeroGradient,
    #[error("update direction `{0}` has zero norm")]
    ZeroDirection(&'static str),
    #[error("step fractions must lie in [0, 1], got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    pub token_count: usize,
    pub rank: usize,
    pub max_rank: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankCurve {
    pub points: Vec<RankPoint>,
}

impl RankCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token_count,rank,max_rank\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.token_count, p.rank, p.max_rank));
        }
        out
    }
}

/// Per-token logit gradients `P_context − onehot(next)` for `n` token
/// occurrences drawn without replacement.
pub fn per_token_gradients(probs: &Matrix, counts: &CountMatrix, n: usize, rng: &mut ChaCha8Rng) -> Result<Matrix, DiagnosticsError> {
    let total = counts.total() as usize;
    if n == 0 {
        return Err(DiagnosticsError::BadTokenCounts);
    }
    if n > total {
        return Err(DiagnosticsError::NotEnoughTokens {
            requested: n,
            available: total,
        });
    }
    let mut picks = index::sample(rng, total, n).into_vec();
    picks.sort_unstable();
    // walk the occurrences in row-major count order
    let v = counts.vocab_size();
    let mut out = Matrix::zeros(n, v);
    let mut cursor = 0usize;
    let mut k = 0usize;
    'rows: for i in 0..counts.rows() {
        for (j, &c) in counts.row_counts(i).iter().enumerate() {
            let end = cursor + c as usize;
            while k < n && picks[k] < end {
                let row = out.row_mut(k);
                row.copy_from_slice(probs.row(i));
                row[j] -= 1.0;
                k += 1;
            }
            cursor = end;
            if k == n {
                break 'rows;
            }
        }
    }
    Ok(out)
}

/// Empirical rank (pivoted QR, `|R_ii| > 1e-6`) of per-token logit gradients
/// as the number of tokens grows.
pub fn gradient_rank_curve(
    counts: &CountMatrix,
    params: &ModelParams,
    token_counts: &[usize],
    seed: u64,
) -> Result<RankCurve, DiagnosticsError> {
    if token_counts.is_empty() || token_counts[0] == 0 || token_counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DiagnosticsError::BadTokenCounts);
    }
    let probs = forward(counts, params)?.probs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(token_counts.len());
    for &n in token_counts {
        let g = per_token_gradients(&probs, counts, n, &mut rng)?;
        points.push(RankPoint {
            token_count: n,
            rank: qr_rank(&g, DEFAULT_RANK_TOL),
            max_rank: n.min(counts.vocab_size()),
        });
    }
    Ok(RankCurve { points })
}

fn check_vocab(g: &Matrix, head: &HeadWeights) -> Result<(), DiagnosticsError> {
    if g.cols() != head.vocab_size() {
        return Err(DiagnosticsError::VocabMismatch {
            expected: head.vocab_size(),
            got: g.cols(),
        });
    }
    Ok(())
}

/// Projection of every row of `g` onto `ker(Wᵀ)` for the effective head.
pub fn kernel_projection(g: &Matrix, head: &HeadWeights) -> Result<Matrix, DiagnosticsError> {
    check_vocab(g, head)?;
    let basis = kernel_basis(&head.effective());
    Ok(project_rows_onto_span(g, &basis)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LostFraction {
    /// `‖p_ker(G)‖_F / ‖G‖_F`, 0 for a zero gradient.
    pub fraction: f64,
    pub zero_gradient: bool,
}

pub fn lost_norm_fraction(g: &Matrix, head: &HeadWeights) -> Result<LostFraction, DiagnosticsError> {
    let total = g.frobenius_norm();
    if total == 0.0 {
        check_vocab(g, head)?;
        return Ok(LostFraction {
            fraction: 0.0,
            zero_gradient: true,
        });
    }
    let lost = kernel_projection(g, head)?.frobenius_norm();
    Ok(LostFraction {
        fraction: (lost / total).min(1.0),
        zero_gradient: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineStats {
    pub mean: f64,
    pub std: f64,
    pub rows_used: usize,
    /// Zero rows, left out of the statistics.
    pub rows_excluded: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn row_cosines(g: &Matrix, kernel_part: &Matrix) -> (Vec<f64>, usize) {
    let mut cos = Vec::with_capacity(g.rows());
    let mut excluded = 0;
    for i in 0..g.rows() {
        let gn = norm(g.row(i));
        if gn == 0.0 {
            excluded += 1;
            continue;
        }
        // ‖g − p_ker(g)‖ / ‖g‖ = cos(g, projection onto the complement)
        let visible: Vec<f64> = g.row(i).iter().zip(kernel_part.row(i)).map(|(a, b)| a - b).collect();
        cos.push((norm(&visible) / gn).min(1.0));
    }
    (cos, excluded)
}

/// Cosine between each nonzero row and its projection onto the complement
/// of `ker(Wᵀ)`.
pub fn kernel_cosine(g: &Matrix, head: &HeadWeights) -> Result<CosineStats, DiagnosticsError> {
    let kernel_part = kernel_projection(g, head)?;
    let (cos, excluded) = row_cosines(g, &kernel_part);
    if cos.is_empty() {
        return Err(DiagnosticsError::ZeroGradient);
    }
    let (mean, std) = mean_std(&cos);
    Ok(CosineStats {
        mean,
        std,
        rows_used: cos.len(),
        rows_excluded: excluded,
    })
}

/// Lower bound on `‖Δ − G‖_F` for any rank-`2D` update `Δ`.
pub fn eckart_young_gap(g: &Matrix, hidden_dim: usize) -> Result<f64, DiagnosticsError> {
    Ok(best_rank_k_residual(g, 2 * hidden_dim)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub lost_fraction: f64,
    /// `‖G − p_ker(G)‖_F / ‖G‖_F`
    pub retained_fraction: f64,
    pub cosine_mean: f64,
    pub cosine_std: f64,
    pub eckart_young_gap: f64,
    /// Lost fraction of each nonzero row (zero rows report 0).
    pub per_row_lost: Vec<f64>,
}

impl CompressionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("lost_fraction,{}\n", self.lost_fraction));
        out.push_str(&format!("retained_fraction,{}\n", self.retained_fraction));
        out.push_str(&format!("cosine_mean,{}\n", self.cosine_mean));
        out.push_str(&format!("cosine_std,{}\n", self.cosine_std));
        out.push_str(&format!("eckart_young_gap,{}\n", self.eckart_young_gap));
        out
    }

    pub fn per_row_csv(&self) -> String {
        let mut out = String::from("row,lost_fraction\n");
        for (i, f) in self.per_row_lost.iter().enumerate() {
            out.push_str(&format!("{i},{f}\n"));
        }
        out
    }
}

/// All norm-split statistics of `g` against one head.
pub fn compression_report(g: &Matrix, head: &HeadWeights) -> Result<CompressionReport, DiagnosticsError> {
    let total = g.frobenius_norm();
    if total == 0.0 {
        return Err(DiagnosticsError::ZeroGradient);
    }
    let kernel_part = kernel_projection(g, head)?;
    let lost = kernel_part.frobenius_norm();
    let retained = g.sub(&kernel_part)?.frobenius_norm();
    let (cos, _) = row_cosines(g, &kernel_part);
    let (cosine_mean, cosine_std) = mean_std(&cos);
    let per_row_lost = (0..g.rows())
        .map(|i| {
            let gn = norm(g.row(i));
            if gn == 0.0 {
                0.0
            } else {
                norm(kernel_part.row(i)) / gn
            }
        })
        .collect();
    Ok(CompressionReport {
        lost_fraction: lost / total,
        retained_fraction: retained / total,
        cosine_mean,
        cosine_std,
        eckart_young_gap: eckart_young_gap(g, head.hidden_dim())?,
        per_row_lost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientProfile {
    pub full_mean: Vec<f64>,
    pub full_std: Vec<f64>,
    pub proj_mean: Vec<f64>,
    pub proj_std: Vec<f64>,
}

impl CoefficientProfile {
    pub fn len(&self) -> usize {
        self.full_mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.full_mean.is_empty()
    }

    /// Positions are 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,full_mean,full_std,proj_mean,proj_std\n");
        for k in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                k + 1,
                self.full_mean[k],
                self.full_std[k],
                self.proj_mean[k],
                self.proj_std[k]
            ));
        }
        out
    }
}

/// Mean and std of the full and projected coefficients at each rank position
/// after sorting every row by `|G_full|`, descending. Rows are sign-flipped
/// so that the leading coefficient of `G_full` is negative.
pub fn coefficient_profile(g_full: &Matrix, g_proj: &Matrix) -> Result<CoefficientProfile, DiagnosticsError> {
    if g_full.shape() != g_proj.shape() {
        return Err(LinalgError::DimensionMismatch {
            op: "coefficient_profile",
            left: g_full.shape(),
            right: g_proj.shape(),
        }
        .into());
    }
    let (rows, v) = g_full.shape();
    let mut sum = [vec![0.0; v], vec![0.0; v]];
    let mut sum_sq = [vec![0.0; v], vec![0.0; v]];
    let mut order: Vec<usize> = (0..v).collect();
    for i in 0..rows {
        let full = g_full.row(i);
        let proj = g_proj.row(i);
        order.sort_by(|&a, &b| full[b].abs().total_cmp(&full[a].abs()).then(a.cmp(&b)));
        let sign = if full[order[0]] > 0.0 { -1.0 } else { 1.0 };
        for (pos, &j) in order.iter().enumerate() {
            for (k, x) in [full[j], proj[j]].into_iter().enumerate() {
                let x = sign * x;
                sum[k][pos] += x;
                sum_sq[k][pos] += x * x;
            }
        }
    }
    let n = rows as f64;
    let stats = |k: usize| -> (Vec<f64>, Vec<f64>) {
        let mean: Vec<f64> = sum[k].iter().map(|s| s / n).collect();
        let std = sum_sq[k]
            .iter()
            .zip(&mean)
            .map(|(s2, m)| (s2 / n - m * m).max(0.0).sqrt())
            .collect();
        (mean, std)
    };
    let (full_mean, full_std) = stats(0);
    let (proj_mean, proj_std) = stats(1);
    Ok(CoefficientProfile {
        full_mean,
        full_std,
        proj_mean,
        proj_std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyCurve {
    pub fractions: Vec<f64>,
    /// Loss change along `−G_L/‖G_L‖`.
    pub loss_delta_logit_dir: Vec<f64>,
    /// Loss change along `−∇_H·Wᵀ/‖∇_H·Wᵀ‖`.
    pub loss_delta_hidden_dir: Vec<f64>,
    /// Cosine between the two directions.
    pub direction_cosine: f64,
}

impl EfficiencyCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,delta_logit,delta_hidden\n");
        for k in 0..self.fractions.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.fractions[k], self.loss_delta_logit_dir[k], self.loss_delta_hidden_dir[k]
            ));
        }
        out
    }
}

/// Loss change from moving the logits by `α·‖L‖_F` along the logit gradient
/// direction and along the direction induced by a hidden-state step.
pub fn update_efficiency(
    counts: &CountMatrix,
    params: &ModelParams,
    fractions: &[f64],
) -> Result<EfficiencyCurve, DiagnosticsError> {
    if let Some(&bad) = fractions.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(DiagnosticsError::BadFraction(bad));
    }
    let h = params.h.select_rows(counts.context_ids());
    let w = params.head.effective();
    let logits = h.matmul_t(&w)?;
    let base = forward_from_logits(counts, logits.clone());
    let g = logit_gradient(counts, &base.probs)?;
    // ∇_H·Wᵀ = G·W·Wᵀ
    let hidden_dir = g.matmul(&w)?.matmul_t(&w)?;
    let g_norm = g.frobenius_norm();
    let hd_norm = hidden_dir.frobenius_norm();
    if g_norm == 0.0 {
        return Err(DiagnosticsError::ZeroDirection("logit gradient"));
    }
    if hd_norm == 0.0 {
        return Err(DiagnosticsError::ZeroDirection("hidden-state direction"));
    }
    let budget = logits.frobenius_norm();
    let loss_after = |dir: &Matrix, dir_norm: f64, alpha: f64| -> f64 {
        if alpha == 0.0 {
            return 0.0;
        }
        let mut moved = logits.clone();
        moved.add_scaled(-alpha * budget / dir_norm, dir).expect("same shape");
        forward_from_logits(counts, moved).loss - base.loss
    };
    Ok(EfficiencyCurve {
        fractions: fractions.to_vec(),
        loss_delta_logit_dir: fractions.iter().map(|&a| loss_after(&g, g_norm, a)).collect(),
        loss_delta_hidden_dir: fractions.iter().map(|&a| loss_after(&hidden_dir, hd_norm, a)).collect(),
        direction_cosine: g.frobenius_inner(&hidden_dir) / (g_norm * hd_norm),
    })
}

/// Logit gradient of a model on the count rows.
pub fn model_logit_gradient(counts: &CountMatrix, params: &ModelParams) -> Result<Matrix, DiagnosticsError> {
    let fwd = forward(counts, params)?;
    Ok(logit_gradient(counts, &fwd.probs)?)
}
