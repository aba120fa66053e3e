use paris::data::{GroupId, GroupedDataset, Normalization};
use paris::linalg::{CholeskyFactor, DenseMatrix};
use paris::metrics::{conditional_rmse, rmse};
use paris::paris::{cycle_budget, deletion_residuals, min_retained, PruneConfig};
use paris::representer::{AlphaRule, AlphaSolver, RepresenterState};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-2.0..2.0f64, rows * cols)
        .prop_map(move |v| DenseMatrix::from_row_major(rows, cols, v).unwrap())
}

fn problem() -> impl Strategy<Value = (DenseMatrix, Vec<f64>, DenseMatrix, Vec<f64>, f64)> {
    (4usize..24, 1usize..6, 1usize..8).prop_flat_map(|(n, d, nv)| {
        (
            matrix(n, d),
            prop::collection::vec(-3.0..3.0f64, n),
            matrix(nv, d),
            prop::collection::vec(-3.0..3.0f64, nv),
            0.3..5.0f64,
        )
    })
}

fn state(p: &(DenseMatrix, Vec<f64>, DenseMatrix, Vec<f64>, f64)) -> RepresenterState {
    RepresenterState::build(
        p.0.clone(),
        p.1.clone(),
        p.2.clone(),
        p.3.clone(),
        None,
        p.4,
        AlphaRule::Dual,
        AlphaSolver::Primal,
    )
    .unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deletion_residual_matches_fixed_alpha_removal(p in problem(), v in 0usize..8) {
        let s = state(&p);
        let v = v % s.n_val();
        let row = deletion_residuals(&s, v);
        let r = s.residuals()[v];
        let full = s.influence();
        for (k, d) in row.delta.iter().enumerate() {
            let after = r + full.row(v)[k];
            prop_assert!((d - (after * after - r * r)).abs() <= 1e-10 * (1.0 + r * r));
        }
    }

    #[test]
    fn incremental_removal_matches_rebuild(p in problem(), pos in 0usize..24) {
        let mut s = state(&p);
        let pos = pos % s.n_train();
        s.remove_training_point(pos).unwrap();

        let keep: Vec<usize> = (0..p.0.rows()).filter(|&i| i != pos).collect();
        let rows: Vec<&[f64]> = keep.iter().map(|&i| p.0.row(i)).collect();
        let fresh = RepresenterState::build(
            DenseMatrix::from_rows(&rows).unwrap(),
            keep.iter().map(|&i| p.1[i]).collect(),
            p.2.clone(),
            p.3.clone(),
            Some(keep.clone()),
            p.4,
            AlphaRule::Dual,
            AlphaSolver::Primal,
        )
        .unwrap();
        prop_assert_eq!(s.train_ids(), fresh.train_ids());
        prop_assert!(close(s.w_star(), fresh.w_star(), 1e-8));
        prop_assert!(close(s.alpha(), fresh.alpha(), 1e-8));
        prop_assert!(close(s.residuals(), fresh.residuals(), 1e-8));
    }

    #[test]
    fn downdate_inverts_rank_one_update(a in matrix(6, 4), v in prop::collection::vec(-1.0..1.0f64, 4)) {
        // A = BᵀB + I is comfortably positive definite.
        let mut gram = a.transpose().matmul(&a).unwrap();
        gram.add_diagonal(1.0);
        let mut updated = gram.clone();
        for i in 0..4 {
            for j in 0..4 {
                updated.row_mut(i)[j] += v[i] * v[j];
            }
        }
        let down = CholeskyFactor::factorize(&updated).unwrap().downdate(&v).unwrap();
        prop_assert!(close(down.reconstruct().as_slice(), gram.as_slice(), 1e-9));
    }

    #[test]
    fn rmse_ignores_sample_order(
        pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 1..40),
        shift in 0usize..40,
    ) {
        let (t, p): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let mut rotated = pairs.clone();
        rotated.rotate_left(shift % pairs.len());
        let (rt, rp): (Vec<f64>, Vec<f64>) = rotated.into_iter().unzip();
        prop_assert!((rmse(&t, &p).unwrap() - rmse(&rt, &rp).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn conditional_rmse_counts_grow_with_threshold(
        pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 1..40),
        lo in -12.0..12.0f64,
        gap in 0.0..10.0f64,
    ) {
        let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let a = conditional_rmse(&t, &p, lo).unwrap();
        let b = conditional_rmse(&t, &p, lo + gap).unwrap();
        prop_assert!(a.n_samples <= b.n_samples);
        let all = conditional_rmse(&t, &p, f64::INFINITY).unwrap();
        prop_assert!((all.crmse.unwrap() - rmse(&t, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn normalization_round_trips_targets(y in prop::collection::vec(-100.0..100.0f64, 2..30)) {
        let n = y.len();
        let ds = GroupedDataset::new(
            DenseMatrix::from_row_major(n, 1, y.iter().map(|v| v * 0.5).collect()).unwrap(),
            y.clone(),
            vec![GroupId("g".into()); n],
            (0..n).collect(),
        )
        .unwrap();
        let norm = Normalization::fit(&ds);
        let back = norm.denormalize_targets(&norm.normalize_targets(&y));
        prop_assert!(close(&back, &y, 1e-10));
    }

    #[test]
    fn budget_never_crosses_the_retention_floor(
        n in 1usize..5000,
        p in 0.01..0.95f64,
        p_max in 0.01..0.99f64,
    ) {
        let cfg = PruneConfig { prune_fraction: p, max_prune_fraction: p_max, ..PruneConfig::default() };
        let floor = min_retained(n, p_max);
        let mut current = n;
        let mut cycles = 0;
        while current > floor {
            let b = cycle_budget(current, n, &cfg);
            prop_assert!(b.k >= 1);
            prop_assert!(current - b.k >= floor);
            current -= b.k;
            cycles += 1;
            prop_assert!(cycles <= n);
        }
        prop_assert_eq!(current, floor);
    }
}
