use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safenav::envsuite::{bundled, EnvironmentSpec};
use safenav::eval::{run_eval, summarize, Outcome};
use safenav::geometry::{Rect, Vec2};
use safenav::neural::{Activation, Head, Layer, MlpNetwork};
use safenav::sim::{ActionId, SimParams, WorldGeometry, OBS_DIM};

/// Policy whose logits ignore the input and favour `action`.
fn constant_policy(action: usize) -> MlpNetwork {
    let mut b = Array1::zeros(7);
    b[action] = 1.0;
    let layers = vec![
        Layer {
            weights: Array2::zeros((4, OBS_DIM)),
            biases: Array1::zeros(4),
            activation: Activation::Tanh,
            frozen: false,
        },
        Layer {
            weights: Array2::zeros((7, 4)),
            biases: b,
            activation: Activation::Identity,
            frozen: false,
        },
    ];
    MlpNetwork::from_layers(layers, Head::SoftmaxPolicy).unwrap()
}

fn open_room() -> EnvironmentSpec {
    let bounds = Rect::new(Vec2::new(0.0, 0.0), Vec2::new(50.0, 50.0));
    let inner = bounds.inset(2.0).unwrap();
    EnvironmentSpec::new("open", WorldGeometry::empty(bounds).unwrap(), vec![inner], vec![inner]).unwrap()
}

#[test]
fn always_rotating_times_out() {
    let s = run_eval(&constant_policy(5), &open_room(), &SimParams::default(), 5, &[1, 2]).unwrap();
    assert_eq!((s.success_rate, s.collision_rate, s.timeout_rate), (0.0, 0.0, 1.0));
    assert_eq!(s.mean_deviation, None);
    assert_eq!(s.episodes, 10);
}

#[test]
fn straight_walk_deviation_is_one_up_to_goal_radius() {
    use rand::Rng;
    use safenav::sim::{Episode, RobotState, Terminal};
    let spec = open_room();
    let params = SimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..30 {
        let start = Vec2::new(rng.gen_range(3.0..47.0), rng.gen_range(3.0..47.0));
        let goal = Vec2::new(rng.gen_range(3.0..47.0), rng.gen_range(3.0..47.0));
        let offset = goal - start;
        let mut ep = Episode::new(RobotState::new(start, offset.y.atan2(offset.x), 0.4), goal);
        while !ep.terminal.is_terminal() {
            ep.step(&spec.geometry, ActionId(2), &params).unwrap();
        }
        if ep.initial_distance < params.goal_radius {
            continue;
        }
        assert_eq!(ep.terminal, Terminal::Reached);
        let dev = ep.path_length / ep.initial_distance;
        // the walk stops on entering the goal disc, up to one step early
        let d = ep.initial_distance;
        let lo = (d - params.goal_radius) / d;
        let hi = (d - params.goal_radius + params.step_length) / d;
        assert!(dev >= lo - 1e-9 && dev <= hi + 1e-9, "deviation {dev}");
    }
}

#[test]
fn evaluation_is_deterministic_and_rates_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = MlpNetwork::policy(OBS_DIM, 7, &mut rng);
    let spec = bundled("envTest2").unwrap();
    let a = run_eval(&net, &spec, &SimParams::default(), 20, &[0, 1, 2]).unwrap();
    let b = run_eval(&net, &spec, &SimParams::default(), 20, &[0, 1, 2]).unwrap();
    assert_eq!(a, b);
    assert!((a.success_rate + a.collision_rate + a.timeout_rate - 1.0).abs() < 1e-12);
    assert_eq!(a.episodes, 60);
}

#[test]
fn summary_matches_hand_computed_averages() {
    use safenav::eval::EpisodeRecord;
    let rec = |outcome, path, init| EpisodeRecord {
        env: "t".into(),
        seed: 9,
        episode: 0,
        outcome,
        path_length: path,
        initial_distance: init,
        steps: 1,
    };
    let records = [
        rec(Outcome::Reached, 20.0, 10.0),
        rec(Outcome::Reached, 12.0, 12.0),
        rec(Outcome::Reached, 9.0, 6.0),
        rec(Outcome::Crashed, 3.0, 10.0),
        rec(Outcome::Timeout, 100.0, 10.0),
    ];
    let s = summarize("t", &records, &[9]);
    assert_eq!(s.success_rate, 0.6);
    assert_eq!(s.collision_rate, 0.2);
    assert!((s.timeout_rate - 0.2).abs() < 1e-15);
    assert!((s.mean_deviation.unwrap() - (2.0 + 1.0 + 1.5) / 3.0).abs() < 1e-12);
}
