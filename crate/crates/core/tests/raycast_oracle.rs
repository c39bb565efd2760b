mod common;

use common::{as_tuples, random_world};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safenav::geometry::Vec2;
use safenav::sim::{observe, raycast, RobotState, N_SCANS};
use safenav_oracles::{brute_raycast, segments};

#[test]
fn ten_thousand_rays_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for w in 0..100 {
        let world = random_world(&mut rng, w % 12);
        let polys: Vec<_> = world.obstacles().iter().map(as_tuples).collect();
        let segs = segments((0.0, 0.0), (50.0, 50.0), &polys);
        for _ in 0..100 {
            let origin = Vec2::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0));
            let angle = rng.gen_range(-4.0..4.0);
            let max_range = if rng.gen_bool(0.5) { 10.0 } else { 80.0 };
            let got = raycast(&world, origin, angle, max_range).unwrap();
            let want = brute_raycast(&segs, (origin.x, origin.y), angle, max_range);
            worst = worst.max((got - want).abs());
        }
    }
    assert!(worst < 1e-6, "worst deviation {worst}");
}

#[test]
fn scans_are_one_exactly_without_hit() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let world = random_world(&mut rng, 6);
    let polys: Vec<_> = world.obstacles().iter().map(as_tuples).collect();
    let segs = segments((0.0, 0.0), (50.0, 50.0), &polys);
    for _ in 0..50 {
        let p = Vec2::new(rng.gen_range(1.0..49.0), rng.gen_range(1.0..49.0));
        let heading = rng.gen_range(-3.0..3.0);
        let robot = RobotState::new(p, heading, 0.4);
        let obs = observe(&world, &robot, Vec2::new(25.0, 25.0), 10.0).unwrap();
        for (i, &s) in obs.scans().iter().enumerate() {
            let angle = heading + std::f64::consts::TAU * i as f64 / N_SCANS as f64;
            let free = brute_raycast(&segs, (p.x, p.y), angle, f64::INFINITY) >= 10.0;
            assert_eq!(s == 1.0, free, "ray {i}");
        }
    }
}

proptest! {
    #[test]
    fn observation_stays_in_unit_range(
        seed in any::<u64>(),
        x in 0.0f64..50.0,
        y in 0.0f64..50.0,
        gx in 0.0f64..50.0,
        gy in 0.0f64..50.0,
        heading in -10.0f64..10.0,
    ) {
        let world = random_world(&mut ChaCha8Rng::seed_from_u64(seed), 5);
        let robot = RobotState::new(Vec2::new(x, y), heading, 0.4);
        let obs = observe(&world, &robot, Vec2::new(gx, gy), 10.0).unwrap();
        prop_assert_eq!(obs.as_slice().len(), 53);
        for v in obs.as_slice() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn raycast_never_exceeds_cap(seed in any::<u64>(), angle in -7.0f64..7.0, cap in 0.1f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = random_world(&mut rng, 4);
        let o = Vec2::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0));
        let r = raycast(&world, o, angle, cap).unwrap();
        prop_assert!((0.0..=cap).contains(&r));
    }
}
