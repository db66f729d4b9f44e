mod common;

use deinforeg::autodiff::{fd_check, Graph};
use deinforeg::layers::{BatchNorm1d, BnMode, ParamBinding, ParamGroup, ParamSet};
use deinforeg::losses::{self, LossConfig};
use deinforeg::tensor::{Matrix, RngState, NORM_EPS};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
    RngState::new(seed).normal(rows, cols, 0.0, scale)
}

fn scalar(f: impl FnOnce(&mut Graph, deinforeg::autodiff::Var) -> deinforeg::Result<deinforeg::autodiff::Var>, x: &Matrix) -> f64 {
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v).unwrap();
    g.value(out).item()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(m in 1usize..7, k in 1usize..7, p in 1usize..7, q in 1usize..7, seed in any::<u64>()) {
        let a = matrix(m, k, seed, 1.0);
        let b = matrix(k, p, seed ^ 1, 1.0);
        let c = matrix(p, q, seed ^ 2, 1.0);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn normalize_is_idempotent(n in 1usize..9, c in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = matrix(n, c, seed, scale);
        let once = x.row_l2_normalize(NORM_EPS);
        let twice = once.row_l2_normalize(NORM_EPS);
        prop_assert!(once.max_abs_diff(&twice) < 1e-7);
    }

    #[test]
    fn centered_columns_have_zero_mean(n in 1usize..9, c in 1usize..9, seed in any::<u64>(), shift in -100.0f64..100.0) {
        let x = matrix(n, c, seed, 3.0).map(|v| v + shift);
        let mut g = Graph::new();
        let v = g.constant(x);
        let mu = g.mean_columns(v).unwrap();
        let centered = g.sub(v, mu).unwrap();
        let means = g.value(centered).column_means();
        prop_assert!(means.data().iter().all(|m| m.abs() < 1e-10));
    }

    #[test]
    fn losses_ignore_row_order(n in 2usize..9, c in 2usize..7, k in 2usize..5, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let x = rng.normal(n, c, 0.0, 1.0);
        let y = common::random_one_hot(&mut rng, n, k);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let (xp, yp) = (x.select_rows(&perm), y.select_rows(&perm));
        let cfg = LossConfig::default();
        let pairs = [
            (scalar(|g, v| losses::variance_loss(g, v, &cfg), &x), scalar(|g, v| losses::variance_loss(g, v, &cfg), &xp)),
            (scalar(|g, v| losses::invariance_loss(g, v, &y, &cfg), &x), scalar(|g, v| losses::invariance_loss(g, v, &yp, &cfg), &xp)),
            (scalar(losses::covariance_loss, &x), scalar(losses::covariance_loss, &xp)),
            (
                scalar(|g, v| Ok(losses::local_loss(g, v, &y, &cfg)?.total), &x),
                scalar(|g, v| Ok(losses::local_loss(g, v, &yp, &cfg)?.total), &xp),
            ),
        ];
        for (a, b) in pairs {
            prop_assert!(close(a, b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn covariance_ignores_column_shift(n in 2usize..9, c in 2usize..7, seed in any::<u64>()) {
        let x = matrix(n, c, seed, 1.0);
        let shift = matrix(1, c, seed ^ 9, 10.0);
        let shifted = Matrix::from_rows(&(0..n).map(|r| {
            x.row(r).iter().zip(shift.row(0)).map(|(a, b)| a + b).collect::<Vec<_>>()
        }).collect::<Vec<_>>());
        let a = scalar(losses::covariance_loss, &x);
        let b = scalar(losses::covariance_loss, &shifted);
        prop_assert!(close(a, b, 1e-9), "{a} vs {b}");
    }

    #[test]
    fn invariance_ignores_positive_row_scaling(n in 2usize..9, c in 2usize..7, k in 2usize..5, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let x = rng.normal(n, c, 0.0, 1.0);
        let y = common::random_one_hot(&mut rng, n, k);
        let mut scaled = x.clone();
        for r in 0..n {
            let s = 0.5 + 4.0 * rng.uniform();
            scaled.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let cfg = LossConfig::default();
        let a = scalar(|g, v| losses::invariance_loss(g, v, &y, &cfg), &x);
        let b = scalar(|g, v| losses::invariance_loss(g, v, &y, &cfg), &scaled);
        prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn batchnorm_train_ignores_column_shift(n in 2usize..9, c in 1usize..6, seed in any::<u64>()) {
        let x = matrix(n, c, seed, 2.0);
        let shift = matrix(1, c, seed ^ 3, 20.0);
        let mut params = ParamSet::new();
        let mut bn = BatchNorm1d::new(&mut params, "bn", ParamGroup::Encoder, c).unwrap();
        let mut run = |input: Matrix| {
            let mut g = Graph::new();
            let mut bind = ParamBinding::new(&params);
            let v = g.constant(input);
            let out = bn.forward(&mut g, &params, &mut bind, v, BnMode::Train { track_stats: false }).unwrap();
            g.value(out).clone()
        };
        let base = run(x.clone());
        let moved = run(x.zip_map(&Matrix::from_rows(&vec![shift.row(0).to_vec(); n]), |a, b| a + b));
        prop_assert!(base.max_abs_diff(&moved) < 1e-6);
    }
}

#[test]
fn local_loss_gradients_match_finite_differences_on_twenty_seeds() {
    for seed in 0..20u64 {
        let mut rng = RngState::new(seed);
        let n = 2 + rng.below(7);
        let c = 2 + rng.below(7);
        let x = rng.normal(n, c, 0.0, 1.0);
        let y = common::random_one_hot(&mut rng, n, 3);
        let mut g = Graph::new();
        let v = g.param(x);
        let nodes = losses::local_loss(&mut g, v, &y, &LossConfig::default()).unwrap();
        let err = fd_check(&g, nodes.total, v, 1e-6).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}
