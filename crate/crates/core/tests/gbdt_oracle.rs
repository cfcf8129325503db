mod common;

use common::{gbdt_dataset, loss_curve, replay_against_oracle, Gen};
use ecg_fusion::gbdt::{self, GbdtConfig, TreeNode};
use ecg_fusion::Matrix;

fn exact(n_rounds: usize, max_depth: usize) -> GbdtConfig {
    GbdtConfig {
        n_rounds,
        max_depth,
        subsample: 1.0,
        colsample_bytree: 1.0,
        ..GbdtConfig::default()
    }
}

#[test]
fn splits_match_exhaustive_search() {
    let mut g = Gen::new(11);
    let mut total = common::ReplayStats::default();
    for case in 0..12 {
        let n = 20 + g.below(181);
        let d = 1 + g.below(10);
        let (x, y) = gbdt_dataset(&mut g, n, d);
        let mut cfg = exact(8, 1 + g.below(6));
        cfg.reg_lambda = [0.0, 1.0, 3.0][case % 3];
        cfg.gamma = [0.0, 0.05][case % 2];
        cfg.min_child_weight = [0.0, 1.0, 2.5][case % 3];
        let model = gbdt::train(&x, &y, &cfg).unwrap();
        let stats = replay_against_oracle(&x, &y, &cfg, &model.trees)
            .unwrap_or_else(|e| panic!("case {case}: {e}"));
        total.splits += stats.splits;
        total.leaves += stats.leaves;
        total.near_ties += stats.near_ties;
    }
    assert!(total.splits > 100, "{total:?}");
}

#[test]
fn depth_never_exceeds_limit() {
    let mut g = Gen::new(3);
    let (x, y) = gbdt_dataset(&mut g, 300, 5);
    for depth in 1..=4 {
        let cfg = GbdtConfig {
            n_rounds: 10,
            max_depth: depth,
            min_child_weight: 0.0,
            ..GbdtConfig::default()
        };
        let m = gbdt::train(&x, &y, &cfg).unwrap();
        assert!(m.trees.iter().all(|t| t.depth() <= depth));
        assert!(m.trees.iter().any(|t| t.depth() == depth));
    }
}

#[test]
fn training_loss_never_increases() {
    let mut g = Gen::new(5);
    for _ in 0..4 {
        let (x, y) = gbdt_dataset(&mut g, 150, 6);
        let cfg = exact(60, 6);
        let m = gbdt::train(&x, &y, &cfg).unwrap();
        let curve = loss_curve(&x, &y, &cfg, &m.trees);
        for w in curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
        let direct = gbdt::log_loss(&m.predict_margin(&x).unwrap(), &y);
        assert!((direct - curve.last().unwrap()).abs() < 1e-12);
    }
}

#[test]
fn row_permutation_gives_same_predictions() {
    let mut g = Gen::new(8);
    let (x, y) = gbdt_dataset(&mut g, 120, 4);
    let cfg = exact(20, 4);
    let m1 = gbdt::train(&x, &y, &cfg).unwrap();

    let mut perm: Vec<usize> = (0..x.rows()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, g.below(i + 1));
    }
    let xp = x.select_rows(&perm);
    let yp: Vec<u8> = perm.iter().map(|&i| y[i]).collect();
    let m2 = gbdt::train(&xp, &yp, &cfg).unwrap();

    // Sums run in a different row order, so only rounding may differ.
    let p1 = m1.predict_proba(&x).unwrap();
    let p2 = m2.predict_proba(&x).unwrap();
    for (a, b) in p1.iter().zip(&p2) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn identical_across_thread_counts() {
    let mut g = Gen::new(21);
    let (x, y) = gbdt_dataset(&mut g, 400, 8);
    let cfg = GbdtConfig {
        n_rounds: 15,
        seed: 7,
        ..GbdtConfig::default()
    };
    let reference = gbdt::train(&x, &y, &cfg).unwrap();
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let m = pool.install(|| gbdt::train(&x, &y, &cfg).unwrap());
        assert_eq!(m, reference);
    }
}

#[test]
fn subsampling_depends_only_on_seed() {
    let mut g = Gen::new(4);
    let (x, y) = gbdt_dataset(&mut g, 200, 6);
    let cfg = GbdtConfig {
        n_rounds: 10,
        ..GbdtConfig::default()
    };
    let a = gbdt::train(&x, &y, &cfg).unwrap();
    let b = gbdt::train(&x, &y, &cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let c = gbdt::train(&x, &y, &GbdtConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.trees, c.trees);
}

#[test]
fn separable_gap_split() {
    let x = Matrix::new(6, 1, vec![-3.0, -2.0, -1.0, 1.0, 2.5, 4.0]).unwrap();
    let y = [0, 0, 0, 1, 1, 1];
    let cfg = GbdtConfig {
        min_child_weight: 0.0,
        ..exact(1, 6)
    };
    let m = gbdt::train(&x, &y, &cfg).unwrap();
    match &m.trees[0] {
        TreeNode::Split {
            threshold,
            left,
            right,
            ..
        } => {
            assert!(*threshold > -1.0 && *threshold < 1.0);
            let (TreeNode::Leaf { weight: wl }, TreeNode::Leaf { weight: wr }) =
                (&**left, &**right)
            else {
                panic!("children should be leaves");
            };
            assert!(*wl < 0.0 && *wr > 0.0);
        }
        other => panic!("expected a split, got {other:?}"),
    }
}
