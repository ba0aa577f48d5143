mod common;

use common::*;
use lpm_core::deployment::{select_static_rank, uncertainty};
use lpm_core::engine::{ParameterStore, Tensor};
use lpm_core::frontier::{pareto_filter, FrontierRecord};
use lpm_core::nested::{truncated_svd, NestedLinear};
use lpm_core::sensitivity::{bh_fdr, significance_test};
use lpm_core::suppressor::refine_ranks;
use lpm_core::trainer::total_loss;
use lpm_core::deployment::PolicyKind;
use proptest::prelude::*;

fn ok(c: Check) {
    if let Err(m) = c {
        panic!("{m}");
    }
}

#[test]
fn nesting_and_rank_on_random_layers() {
    ok(check_nesting(100, 1));
}

#[test]
fn svd_init_matches_jacobi_spectrum() {
    ok(check_svd_optimality(50, 2));
}

#[test]
fn jacobi_oracle_recovers_known_spectrum() {
    // diag(5, 3, 1) rotated by permutations keeps the spectrum.
    let m = vec![vec![0.0, 3.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, -5.0], vec![0.0, 0.0, 0.0]];
    let s = jacobi_singular_values(&m);
    for (got, want) in s.iter().zip([5.0, 3.0, 1.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn gradients_match_finite_differences() {
    ok(check_gradients(3));
}

#[test]
fn privilege_changes_are_reversible() {
    ok(check_reversibility(4));
}

#[test]
fn loss_formula_matches_direct_evaluation() {
    ok(check_loss_formula(1000, 5));
}

#[test]
fn selection_routines_match_brute_force() {
    ok(check_oracles(6));
}

#[test]
fn taskgen_labels_match_parsers() {
    ok(check_taskgen(10_000, &[1, 2, 3, 4, 5], 7));
}

#[test]
fn mcnemar_matches_hand_values() {
    // 5 discordant pairs all one way: 2 * 0.5^5.
    let base = vec![true; 10];
    let mut now = vec![true; 10];
    now[..5].iter_mut().for_each(|x| *x = false);
    assert!((significance_test(&base, &now).unwrap() - 0.0625).abs() < 1e-12);
    assert_eq!(significance_test(&base, &base).unwrap(), 1.0);
}

fn record(utility: f64, avg_privilege: f64) -> FrontierRecord {
    FrontierRecord {
        policy: PolicyKind::StaticLp,
        target: 0.9,
        utility,
        avg_privilege,
        avg_passes: 1.0,
        infeasible: false,
        threshold: None,
        calibrated_rank: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nested_weights_are_rank_limited(d_in in 2usize..12, d_out in 2usize..12, seed in 0u64..1000) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let r = d_in.min(d_out);
        let mut store = ParameterStore::new();
        let layer = NestedLinear::register(&mut store, "p", gaussian(r, d_in, &mut rng), gaussian(d_out, r, &mut rng)).unwrap();
        for g in 1..r {
            let w = layer.effective_weight(&store, g).unwrap();
            let m = nalgebra::DMatrix::from_row_slice(d_out, d_in, w.data());
            prop_assert_eq!(m.rank(1e-9 * m.norm()), g);
        }
    }

    #[test]
    fn svd_error_never_increases_with_rank(rows in 2usize..20, cols in 2usize..20, seed in 0u64..1000) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian(rows, cols, &mut rng);
        let mut prev = f64::INFINITY;
        for r in 1..=rows.min(cols) {
            let (_, _, rep) = truncated_svd(&w, r).unwrap();
            prop_assert!(rep.frobenius_error <= prev + 1e-9);
            prev = rep.frobenius_error;
        }
        prop_assert!(prev < 1e-9);
    }

    #[test]
    fn svd_init_is_exact_on_rank_deficient_inputs(rows in 3usize..24, cols in 3usize..24, k in 1usize..3, seed in 0u64..1000) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(rows, k, &mut rng);
        let y = gaussian(k, cols, &mut rng);
        let w = lpm_core::engine::matmul(&x, &y).unwrap();
        let r = rows.min(cols) - 1;
        let (a, b, rep) = truncated_svd(&w, r).unwrap();
        let back = lpm_core::engine::matmul(&b, &a).unwrap();
        let scale = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(back.max_abs_diff(&w) < 1e-9 * scale.max(1.0));
        prop_assert!(rep.frobenius_error < 1e-9 * scale.max(1.0));
    }

    #[test]
    fn total_loss_is_minimized_at_log_loss(l in 0.01f64..10.0) {
        // d/ds = 0 at s = ln L.
        let s = l.ln();
        let here = total_loss(l, l, s, s);
        prop_assert!(total_loss(l, l, s + 0.01, s) >= here);
        prop_assert!(total_loss(l, l, s - 0.01, s) >= here);
    }

    #[test]
    fn bh_agrees_with_brute_force(p in prop::collection::vec(0.0f64..1.0, 1..40), q in 0.01f64..0.2) {
        prop_assert_eq!(bh_fdr(&p, q), brute_bh(&p, q));
    }

    #[test]
    fn bh_rejections_are_monotone_in_q(p in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let lo = bh_fdr(&p, 0.01);
        let hi = bh_fdr(&p, 0.1);
        prop_assert!(lo.iter().zip(&hi).all(|(a, b)| !a || *b));
    }

    #[test]
    fn static_rank_matches_scan(acc in prop::collection::vec(0.0f64..1.0, 1..8), u0 in 0.0f64..1.0) {
        let pairs: Vec<(usize, f64)> = acc.iter().enumerate().map(|(i, &a)| (1usize << i, a)).collect();
        let got = select_static_rank(&pairs, u0);
        prop_assert_eq!((got.rank, got.infeasible), brute_static_rank(&pairs, u0));
    }

    #[test]
    fn pareto_set_is_undominated_and_complete(
        pts in prop::collection::vec((0u8..6, 0u8..6), 1..20)
    ) {
        let recs: Vec<FrontierRecord> = pts.iter().map(|&(u, p)| record(u as f64 / 5.0, p as f64)).collect();
        let got = pareto_filter(&recs);
        prop_assert_eq!(got.len(), brute_pareto(&recs).len());
        for a in &got {
            for b in &got {
                prop_assert!(!(b.utility >= a.utility && b.avg_privilege <= a.avg_privilege
                    && (b.utility > a.utility || b.avg_privilege < a.avg_privilege)));
            }
        }
    }

    #[test]
    fn refine_ranks_are_valid(fr in prop::collection::vec(0.0f64..1.0, 1..8), r_max in 1usize..64) {
        let ranks = refine_ranks(&fr, r_max);
        prop_assert!(!ranks.is_empty());
        prop_assert!(ranks.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ranks.iter().all(|&r| (1..=r_max).contains(&r)));
    }

    #[test]
    fn uncertainty_is_bounded(p in 0.0f64..1.0) {
        let u = uncertainty(&[p, 1.0 - p]);
        prop_assert!((0.0..=0.5 + 1e-12).contains(&u));
    }

    #[test]
    fn mcnemar_p_is_symmetric(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let p1 = significance_test(&a, &b).unwrap();
        let p2 = significance_test(&b, &a).unwrap();
        prop_assert!((p1 - p2).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&p1));
    }

    #[test]
    fn tensor_shapes_are_checked(r in 1usize..5, c in 1usize..5, extra in 1usize..3) {
        prop_assert!(Tensor::new(vec![r, c], vec![0.0; r * c + extra]).is_err());
    }
}
