use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safenav::neural::{log_softmax, MlpNetwork, Head};
use safenav::sim::OBS_DIM;
use safenav_oracles::{central_difference, NaiveNet};

const H: f64 = 1e-5;

fn batch(rng: &mut impl Rng, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, OBS_DIM), |_| rng.gen::<f64>())
}

/// Scalar objective `Σ_b Σ_k c[b,k]·out[b,k]` through the naive evaluator,
/// with parameter `k` replaced by `theta`.
fn objective(naive: &NaiveNet, k: usize, theta: f64, xs: &Array2<f64>, c: &Array2<f64>) -> f64 {
    let mut net = NaiveNet { layers: naive.layers.clone() };
    *net.param_mut(k) = theta;
    xs.outer_iter()
        .zip(c.outer_iter())
        .map(|(x, cb)| net.forward(x.as_slice().unwrap()).iter().zip(cb).map(|(o, w)| o * w).sum::<f64>())
        .sum()
}

fn flat_grad(grads: &[safenav::neural::LayerGrad], mut k: usize) -> f64 {
    for g in grads {
        let nw = g.weights.len();
        if k < nw {
            return g.weights.as_slice().unwrap()[k];
        }
        k -= nw;
        if k < g.biases.len() {
            return g.biases[k];
        }
        k -= g.biases.len();
    }
    unreachable!()
}

fn check(net: &MlpNetwork, rng: &mut impl Rng, coords: usize) -> f64 {
    let xs = batch(rng, 4);
    let c = Array2::from_shape_fn((4, net.output_dim()), |_| rng.gen_range(-1.0..1.0));
    let cache = net.forward_batch(xs.view()).unwrap();
    let grads = net.backward(&cache, c.view()).unwrap();
    let naive = NaiveNet::from_net(net);
    let n = naive.parameter_count();
    assert_eq!(n, net.parameter_count());
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let k = rng.gen_range(0..n);
        let theta = *NaiveNet { layers: naive.layers.clone() }.param_mut(k);
        let fd = central_difference(|t| objective(&naive, k, t[0], &xs, &c), &[theta], 0, H);
        let an = flat_grad(&grads, k);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn policy_and_value_backward_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let policy = MlpNetwork::policy(OBS_DIM, 7, &mut rng);
    let value = MlpNetwork::value(OBS_DIM, &mut rng);
    assert!(check(&policy, &mut rng, 300) < 1e-4);
    assert!(check(&value, &mut rng, 300) < 1e-4);
}

#[test]
fn forward_matches_naive_evaluator() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for head in [Head::SoftmaxPolicy, Head::ScalarValue] {
        let out = if head == Head::SoftmaxPolicy { 7 } else { 1 };
        let net = MlpNetwork::new(&[OBS_DIM, 64, 64, 64, out], head, &mut rng);
        let naive = NaiveNet::from_net(&net);
        let xs = batch(&mut rng, 50);
        let fast = net.forward_batch(xs.view()).unwrap();
        for (i, x) in xs.outer_iter().enumerate() {
            let want = naive.forward(x.as_slice().unwrap());
            for (a, b) in fast.logits().row(i).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn frozen_layers_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = MlpNetwork::policy(OBS_DIM, 7, &mut rng);
    net.freeze_layers(2).unwrap();
    let xs = batch(&mut rng, 3);
    let c = Array2::from_elem((3, 7), 0.3);
    let grads = net.backward(&net.forward_batch(xs.view()).unwrap(), c.view()).unwrap();
    for (i, g) in grads.iter().enumerate() {
        let zero = g.weights.iter().chain(g.biases.iter()).all(|&v| v == 0.0);
        assert_eq!(zero, i < 2, "layer {i}");
    }
}

#[test]
fn log_softmax_normalizes() {
    let l = log_softmax(&[1000.0, 999.0, -5.0]);
    let s: f64 = l.iter().map(|v| v.exp()).sum();
    assert!((s - 1.0).abs() < 1e-12);
}
