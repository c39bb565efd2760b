//! Planar primitives shared by the simulator and the environment suite.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

/// Parallel/colinear threshold for cross products of unit-scale vectors.
const PARALLEL_EPS: f64 = 1e-12;

/// A point or vector in the plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c, s)
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub const fn new(min: Vec2, max: Vec2) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn is_well_formed(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min.x < self.max.x && self.min.y < self.max.y
    }

    /// Closed containment.
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn contains_strictly(&self, p: Vec2) -> bool {
        p.x > self.min.x && p.x < self.max.x && p.y > self.min.y && p.y < self.max.y
    }

    /// Shrinks every side by `margin`; `None` if nothing remains.
    pub fn inset(&self, margin: f64) -> Option<Rect> {
        let r = Rect::new(
            Vec2::new(self.min.x + margin, self.min.y + margin),
            Vec2::new(self.max.x - margin, self.max.y - margin),
        );
        (r.min.x <= r.max.x && r.min.y <= r.max.y).then_some(r)
    }

    /// Corners in counterclockwise order starting at `min`.
    pub fn corners(&self) -> [Vec2; 4] {
        [
            self.min,
            Vec2::new(self.max.x, self.min.y),
            self.max,
            Vec2::new(self.min.x, self.max.y),
        ]
    }

    pub fn to_polygon(&self) -> Polygon {
        Polygon {
            vertices: self.corners().to_vec(),
        }
    }

    pub fn edges(&self) -> impl Iterator<Item = Segment> + '_ {
        let c = self.corners();
        (0..4).map(move |i| Segment::new(c[i], c[(i + 1) % 4]))
    }
}

/// Closed line segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub const fn new(a: Vec2, b: Vec2) -> Self {
        Self { a, b }
    }

    pub fn closest_point(&self, p: Vec2) -> Vec2 {
        let d = self.b - self.a;
        let len_sq = d.norm_sq();
        if len_sq == 0.0 {
            return self.a;
        }
        let t = ((p - self.a).dot(d) / len_sq).clamp(0.0, 1.0);
        self.a + d * t
    }

    pub fn distance_to_point(&self, p: Vec2) -> f64 {
        self.closest_point(p).distance(p)
    }

    /// True when the two closed segments share at least one point.
    pub fn intersects(&self, other: &Segment) -> bool {
        let d1 = orientation(other.a, other.b, self.a);
        let d2 = orientation(other.a, other.b, self.b);
        let d3 = orientation(self.a, self.b, other.a);
        let d4 = orientation(self.a, self.b, other.b);
        if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
            return true;
        }
        (d1 == 0.0 && on_segment(other, self.a))
            || (d2 == 0.0 && on_segment(other, self.b))
            || (d3 == 0.0 && on_segment(self, other.a))
            || (d4 == 0.0 && on_segment(self, other.b))
    }

    pub fn distance_to_segment(&self, other: &Segment) -> f64 {
        if self.intersects(other) {
            return 0.0;
        }
        self.distance_to_point(other.a)
            .min(self.distance_to_point(other.b))
            .min(other.distance_to_point(self.a))
            .min(other.distance_to_point(self.b))
    }

    /// Distance along a ray to the first point of this segment, if any.
    ///
    /// `dir` must be a unit vector. Colinear overlap reports the nearest
    /// segment point at or ahead of the origin.
    pub fn ray_hit(&self, origin: Vec2, dir: Vec2) -> Option<f64> {
        let edge = self.b - self.a;
        let denom = dir.cross(edge);
        let to_a = self.a - origin;
        if denom.abs() <= PARALLEL_EPS * edge.norm().max(1.0) {
            if to_a.cross(dir).abs() > PARALLEL_EPS * to_a.norm().max(1.0) {
                return None;
            }
            let ta = to_a.dot(dir);
            let tb = (self.b - origin).dot(dir);
            let (near, far) = if ta <= tb { (ta, tb) } else { (tb, ta) };
            return if far < 0.0 {
                None
            } else {
                Some(near.max(0.0))
            };
        }
        let t = to_a.cross(edge) / denom;
        let u = to_a.cross(dir) / denom;
        (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
    }
}

fn orientation(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(s: &Segment, p: Vec2) -> bool {
    p.x >= s.a.x.min(s.b.x)
        && p.x <= s.a.x.max(s.b.x)
        && p.y >= s.a.y.min(s.b.y)
        && p.y <= s.a.y.max(s.b.y)
}

/// Convex polygon, counterclockwise vertex order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub vertices: Vec<Vec2>,
}

impl Polygon {
    pub fn new(vertices: Vec<Vec2>) -> Self {
        Self { vertices }
    }

    pub fn edges(&self) -> impl Iterator<Item = Segment> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| Segment::new(self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Signed area (positive for counterclockwise), shoelace formula.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        let twice: f64 = (0..n)
            .map(|i| self.vertices[i].cross(self.vertices[(i + 1) % n]))
            .sum();
        0.5 * twice
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Strictly convex and counterclockwise. Implies simple.
    pub fn is_convex_ccw(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 || self.vertices.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let turns_left = (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            orientation(a, b, c) > 0.0
        });
        // total turning of exactly one revolution rules out star-shaped windings
        turns_left && {
            let winding: f64 = (0..n)
                .map(|i| {
                    let a = self.vertices[i];
                    let b = self.vertices[(i + 1) % n];
                    let c = self.vertices[(i + 2) % n];
                    let (u, v) = (b - a, c - b);
                    u.cross(v).atan2(u.dot(v))
                })
                .sum();
            (winding - std::f64::consts::TAU).abs() < 1e-6
        }
    }

    /// Closed containment test for a convex counterclockwise polygon.
    pub fn contains(&self, p: Vec2) -> bool {
        self.edges().all(|e| orientation(e.a, e.b, p) >= 0.0)
    }

    pub fn distance_to_point(&self, p: Vec2) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        self.edges()
            .map(|e| e.distance_to_point(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Minimum distance between the polygon (as a filled region) and a segment.
    pub fn distance_to_segment(&self, s: &Segment) -> f64 {
        if self.contains(s.a) || self.contains(s.b) {
            return 0.0;
        }
        self.edges()
            .map(|e| e.distance_to_segment(s))
            .fold(f64::INFINITY, f64::min)
    }

    /// Minimum distance between two filled convex polygons.
    pub fn distance_to_polygon(&self, other: &Polygon) -> f64 {
        if other.vertices.iter().any(|&v| self.contains(v))
            || self.vertices.iter().any(|&v| other.contains(v))
        {
            return 0.0;
        }
        self.edges()
            .flat_map(|e| other.edges().map(move |f| e.distance_to_segment(&f)))
            .fold(f64::INFINITY, f64::min)
    }

    /// Whether the filled polygon and the closed rectangle overlap.
    pub fn intersects_rect(&self, rect: &Rect) -> bool {
        self.distance_to_polygon(&rect.to_polygon()) == 0.0
    }

    pub fn bounding_rect(&self) -> Rect {
        let mut min = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut max = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            min.x = min.x.min(v.x);
            min.y = min.y.min(v.y);
            max.x = max.x.max(v.x);
            max.y = max.y.max(v.y);
        }
        Rect::new(min, max)
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(angle: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let wrapped = (angle + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to TAU for tiny negative inputs
    if wrapped >= PI {
        wrapped - TAU
    } else {
        wrapped
    }
}
