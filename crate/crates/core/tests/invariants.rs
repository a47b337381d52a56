//! Property tests for the model and linear algebra invariants.

use bottleneck_core::corpus::gen_spamlang;
use bottleneck_core::corpus::build_counts;
use bottleneck_core::diagnostics::{kernel_projection, lost_norm_fraction};
use bottleneck_core::linalg::{
    best_rank_k_residual, kernel_basis, log_softmax_rows, project_rows_onto_span, qr_rank, singular_values,
    softmax_rows, DEFAULT_RANK_TOL,
};
use bottleneck_core::matrix_lm::{analytic_logit_update, exact_logit_update, forward, logits, UpdateMask};
use bottleneck_core::{CountMatrix, HeadWeights, Matrix, ModelParams};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |d| Matrix::new(rows, cols, d.into_iter().map(|x| x * scale).collect()).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..8, 2usize..10, 1usize..5)
}

fn counts(c: usize, v: usize) -> impl Strategy<Value = CountMatrix> {
    prop::collection::vec(0u32..5, c * v).prop_map(move |mut d| {
        for i in 0..c {
            if d[i * v..(i + 1) * v].iter().all(|&x| x == 0) {
                d[i * v] = 1;
            }
        }
        CountMatrix::from_counts(v, d, (0..c).collect()).unwrap()
    })
}

fn instance() -> impl Strategy<Value = (CountMatrix, ModelParams)> {
    dims().prop_flat_map(|(c, v, d)| {
        (counts(c, v), matrix(c, d, 2.0), matrix(v, d, 2.0))
            .prop_map(|(n, h, w)| (n, ModelParams::new(h, HeadWeights::full(w)).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(m in (1usize..6, 1usize..12).prop_flat_map(|(r, c)| matrix(r, c, 50.0))) {
        let p = softmax_rows(&m);
        let lp = log_softmax_rows(&m);
        for i in 0..m.rows() {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
            let lse: f64 = lp.row(i).iter().map(|x| x.exp()).sum();
            prop_assert!((lse - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_never_below_entropy_floor((n, params) in instance()) {
        let loss = forward(&n, &params).unwrap().loss;
        prop_assert!(loss >= n.entropy_floor() - 1e-12);
    }

    #[test]
    fn logit_and_log_prob_ranks_are_bounded((_, params) in instance()) {
        let l = logits(&params);
        let d = params.hidden_dim();
        prop_assert!(qr_rank(&l, DEFAULT_RANK_TOL) <= d);
        prop_assert!(qr_rank(&log_softmax_rows(&l), DEFAULT_RANK_TOL) <= d + 1);
    }

    #[test]
    fn projection_is_idempotent(
        (g, w) in (2usize..12, 1usize..12).prop_flat_map(|(v, d)| {
            let d = d.min(v - 1).max(1);
            (matrix(4, v, 1.0), matrix(v, d, 1.0))
        })
    ) {
        let basis = kernel_basis(&w);
        let once = project_rows_onto_span(&g, &basis).unwrap();
        let twice = project_rows_onto_span(&once, &basis).unwrap();
        prop_assert!(once.sub(&twice).unwrap().max_abs() < 1e-10);
        prop_assert!(once.frobenius_norm() <= g.frobenius_norm() + 1e-12);
    }

    #[test]
    fn lost_fraction_is_a_fraction(
        (g, w) in (2usize..12, 1usize..6).prop_flat_map(|(v, d)| (matrix(3, v, 1.0), matrix(v, d, 1.0)))
    ) {
        let head = HeadWeights::full(w);
        let f = lost_norm_fraction(&g, &head).unwrap();
        prop_assert!((0.0..=1.0).contains(&f.fraction));
        let k = kernel_projection(&g, &head).unwrap();
        prop_assert!(k.matmul(&head.effective()).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn residual_is_monotone_in_rank(m in (1usize..10, 1usize..10).prop_flat_map(|(r, c)| matrix(r, c, 3.0))) {
        let max_k = m.rows().min(m.cols());
        let mut prev = f64::INFINITY;
        for k in 0..=max_k {
            let r = best_rank_k_residual(&m, k).unwrap();
            prop_assert!(r <= prev + 1e-12);
            prev = r;
        }
        prop_assert!(prev < 1e-9);
        prop_assert!((best_rank_k_residual(&m, 0).unwrap() - m.frobenius_norm()).abs() < 1e-9);
    }

    #[test]
    fn qr_and_svd_ranks_agree_within_one(m in (1usize..10, 1usize..10, 1usize..10).prop_flat_map(|(r, k, c)| {
        (matrix(r, k, 1.0), matrix(k, c, 1.0)).prop_map(|(a, b)| a.matmul(&b).unwrap())
    })) {
        let qr = qr_rank(&m, DEFAULT_RANK_TOL);
        let svd = singular_values(&m).unwrap().iter().filter(|&&s| s > DEFAULT_RANK_TOL).count();
        prop_assert!(qr.abs_diff(svd) <= 1, "qr {qr} svd {svd}");
    }

    #[test]
    fn logit_update_has_rank_at_most_twice_hidden((n, params) in instance()) {
        let delta = analytic_logit_update(&n, &params, UpdateMask::BOTH).unwrap();
        prop_assert!(qr_rank(&delta, 1e-8) <= 2 * params.hidden_dim());
        let hidden_only = analytic_logit_update(&n, &params, UpdateMask::HIDDEN_ONLY).unwrap();
        prop_assert!(qr_rank(&hidden_only, 1e-8) <= params.hidden_dim());
    }

    #[test]
    fn finite_step_update_converges_to_analytic((n, params) in instance()) {
        let delta = analytic_logit_update(&n, &params, UpdateMask::BOTH).unwrap();
        let coarse = exact_logit_update(&n, &params, 1e-3, UpdateMask::BOTH).unwrap().sub(&delta).unwrap().frobenius_norm();
        let fine = exact_logit_update(&n, &params, 1e-4, UpdateMask::BOTH).unwrap().sub(&delta).unwrap().frobenius_norm();
        // the gap is exactly linear in the step: lr·∇_H·∇_Wᵀ
        prop_assert!(fine <= coarse * 0.1 + 1e-9, "{fine} vs {coarse}");
    }

    #[test]
    fn spamlang_rows_are_one_hot(v in 2usize..20, seqs in 1usize..10, len in 2usize..12, seed in 0u64..100) {
        let corpus = gen_spamlang(v, seqs, len, seed).unwrap();
        let (table, n) = build_counts(&corpus, 1).unwrap();
        prop_assert_eq!(n.total() as usize, seqs * len);
        for i in 0..n.rows() {
            if !table.key(n.context_ids()[i]).is_empty() {
                prop_assert_eq!(n.row_support(i), 1);
            }
        }
    }
}
