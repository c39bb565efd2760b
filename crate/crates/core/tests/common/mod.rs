#![allow(dead_code)]

use rand::Rng;
use safenav::geometry::{Polygon, Rect, Vec2};
use safenav::sim::WorldGeometry;
use std::f64::consts::TAU;

pub fn room() -> Rect {
    Rect::new(Vec2::new(0.0, 0.0), Vec2::new(50.0, 50.0))
}

/// Convex counterclockwise polygon with vertices on a circle.
pub fn random_convex(rng: &mut impl Rng, bounds: &Rect) -> Polygon {
    let r = rng.gen_range(0.5..5.0);
    let c = Vec2::new(
        rng.gen_range(bounds.min.x + r + 0.1..bounds.max.x - r - 0.1),
        rng.gen_range(bounds.min.y + r + 0.1..bounds.max.y - r - 0.1),
    );
    let k = rng.gen_range(3..8);
    let mut angles: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup_by(|a, b| (*a - *b).abs() < 0.05);
    while angles.len() < 3 {
        angles = vec![0.0, TAU / 3.0, 2.0 * TAU / 3.0];
    }
    Polygon::new(angles.iter().map(|&a| c + Vec2::from_angle(a) * r).collect())
}

pub fn random_world(rng: &mut impl Rng, n: usize) -> WorldGeometry {
    let bounds = room();
    let obstacles = (0..n).map(|_| random_convex(rng, &bounds)).collect();
    WorldGeometry::new(bounds, obstacles).unwrap()
}

pub fn as_tuples(poly: &Polygon) -> Vec<(f64, f64)> {
    poly.vertices.iter().map(|v| (v.x, v.y)).collect()
}
