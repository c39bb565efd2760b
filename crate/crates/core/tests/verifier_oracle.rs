use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safenav::neural::{softmax, Head, MlpNetwork};
use safenav::verifier::{
    propagate_bounds, violation_rate, violation_rate_with_leaves, BoundMode, BoxRegion, Decision, SafetyProperty,
    VerifierBudget,
};
use safenav_oracles::{dense_grid_violation, NaiveNet};

fn random_box(rng: &mut impl Rng, dim: usize) -> BoxRegion {
    let (mut lo, mut hi) = (vec![0.0; dim], vec![0.0; dim]);
    for i in 0..dim {
        let a: f64 = rng.gen();
        let b: f64 = rng.gen();
        lo[i] = a.min(b);
        hi[i] = a.max(b);
    }
    BoxRegion::new(lo, hi).unwrap()
}

fn sample_in(rng: &mut impl Rng, b: &BoxRegion) -> Vec<f64> {
    (0..b.dim()).map(|i| b.lower()[i] + rng.gen::<f64>() * b.width(i)).collect()
}

fn random_property(rng: &mut impl Rng, dim: usize, n_out: usize) -> SafetyProperty {
    let f = rng.gen_range(0..n_out);
    SafetyProperty::new("p", BoxRegion::unit(dim), vec![f], (0..n_out).filter(|&i| i != f).collect()).unwrap()
}

#[test]
fn bounds_enclose_samples_and_relaxation_is_tighter() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 0..20 {
        let dim = [2, 4, 53][k % 3];
        let net = MlpNetwork::new(&[dim, 16, 16, 5], Head::SoftmaxPolicy, &mut rng);
        let naive = NaiveNet::from_net(&net);
        let b = random_box(&mut rng, dim);
        let ib = propagate_bounds(&net, &b, BoundMode::Interval).unwrap();
        let lb = propagate_bounds(&net, &b, BoundMode::LinearRelax).unwrap();
        for j in 0..5 {
            assert!(ib.lower[j] <= lb.lower[j] && lb.upper[j] <= ib.upper[j]);
        }
        for _ in 0..2000 {
            let y = naive.forward(&sample_in(&mut rng, &b));
            for j in 0..5 {
                assert!(lb.lower[j] <= y[j] && y[j] <= lb.upper[j]);
            }
        }
    }
}

#[test]
fn safe_leaves_contain_no_violations() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let budget = VerifierBudget {
        max_depth: 8,
        ..VerifierBudget::default()
    };
    let mut safe_leaves = 0;
    for _ in 0..5 {
        let net = MlpNetwork::new(&[4, 8, 8, 3], Head::SoftmaxPolicy, &mut rng);
        let naive = NaiveNet::from_net(&net);
        let prop = random_property(&mut rng, 4, 3);
        let mut leaves = Vec::new();
        violation_rate_with_leaves(&net, &prop, &budget, BoundMode::LinearRelax, |l| leaves.push(l)).unwrap();
        for leaf in leaves.iter().filter(|l| l.decision == Decision::Safe) {
            safe_leaves += 1;
            for _ in 0..500 {
                assert!(!prop.violated_by(&naive.forward(&sample_in(&mut rng, &leaf.region))));
            }
        }
    }
    assert!(safe_leaves > 0);
}

#[test]
fn toy_violation_rate_matches_dense_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..4 {
        let net = MlpNetwork::new(&[2, 8, 8, 3], Head::SoftmaxPolicy, &mut rng);
        let naive = NaiveNet::from_net(&net);
        let prop = random_property(&mut rng, 2, 3);
        let report = violation_rate(&net, &prop, &VerifierBudget::default(), BoundMode::LinearRelax).unwrap();
        let grid = dense_grid_violation(|x| naive.forward(x), prop.forbidden(), 400);
        assert!((report.violation_rate - grid).abs() < 0.02, "{} vs {grid}", report.violation_rate);
    }
}

#[test]
fn deeper_budgets_bracket_the_truth_more_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = MlpNetwork::new(&[2, 8, 8, 3], Head::SoftmaxPolicy, &mut rng);
    let naive = NaiveNet::from_net(&net);
    let prop = random_property(&mut rng, 2, 3);
    let grid = dense_grid_violation(|x| naive.forward(x), prop.forbidden(), 400);
    let mut prev_proven = 0.0;
    let mut prev_gap = f64::INFINITY;
    for depth in [2, 4, 6, 8, 10, 12] {
        let budget = VerifierBudget {
            max_depth: depth,
            ..VerifierBudget::default()
        };
        let r = violation_rate(&net, &prop, &budget, BoundMode::LinearRelax).unwrap();
        let proven = r.proven_safe_volume + r.proven_violating_volume;
        assert!(proven >= prev_proven);
        assert!(r.undecided_volume <= prev_gap);
        // the truth lies between proven violations and proven-or-undecided
        assert!(r.proven_violating_volume <= grid + 0.01);
        assert!(grid <= r.proven_violating_volume + r.undecided_volume + 0.01);
        prev_proven = proven;
        prev_gap = r.undecided_volume;
    }
}

#[test]
fn leaf_volumes_partition_the_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = MlpNetwork::new(&[3, 8, 8, 3], Head::SoftmaxPolicy, &mut rng);
    let prop = random_property(&mut rng, 3, 3);
    let budget = VerifierBudget {
        max_depth: 10,
        max_regions: 300,
        ..VerifierBudget::default()
    };
    let mut total = 0.0;
    let r = violation_rate_with_leaves(&net, &prop, &budget, BoundMode::Interval, |l| {
        total += 0.5f64.powi(l.depth as i32)
    })
    .unwrap();
    assert_eq!(total, 1.0);
    let sum = r.proven_safe_volume + r.proven_violating_volume + r.undecided_volume;
    assert!((sum - 1.0).abs() < 1e-9);
    assert!(r.partial && r.regions == 300);
}

#[test]
fn reports_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = MlpNetwork::new(&[4, 8, 8, 3], Head::SoftmaxPolicy, &mut rng);
    let prop = random_property(&mut rng, 4, 3);
    let b = VerifierBudget {
        max_depth: 10,
        ..VerifierBudget::default()
    };
    let a = violation_rate(&net, &prop, &b, BoundMode::LinearRelax).unwrap();
    assert_eq!(a, violation_rate(&net, &prop, &b, BoundMode::LinearRelax).unwrap());
}

proptest! {
    #[test]
    fn softmax_preserves_verdicts(logits in prop::collection::vec(-20.0f64..20.0, 3..8)) {
        let n = logits.len();
        let prop = SafetyProperty::new("p", BoxRegion::unit(1), vec![0, n - 1], (1..n - 1).collect()).unwrap();
        prop_assert_eq!(prop.violated_by(&logits), prop.violated_by(&softmax(&logits)));
    }

    #[test]
    fn point_bounds_equal_forward(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MlpNetwork::new(&[4, 8, 8, 3], Head::SoftmaxPolicy, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
        let y = NaiveNet::from_net(&net).forward(&x);
        for mode in [BoundMode::Interval, BoundMode::LinearRelax] {
            let b = propagate_bounds(&net, &BoxRegion::point(&x).unwrap(), mode).unwrap();
            for j in 0..3 {
                prop_assert!((b.lower[j] - y[j]).abs() < 1e-9 && (b.upper[j] - y[j]).abs() < 1e-9);
            }
        }
    }
}
