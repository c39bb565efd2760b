//! Slow, independent reference computations for tests.
//!
//! Nothing here calls into the library's numerical code; library types are
//! only read for their raw data.

use rand::Rng;
use safenav::neural::{Activation, MlpNetwork};

pub type P = (f64, f64);

/// Plain-array copy of a network: `(weights[out][in], biases, tanh)`.
pub struct NaiveNet {
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>, bool)>,
}

impl NaiveNet {
    pub fn from_net(net: &MlpNetwork) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let w = l.weights.outer_iter().map(|r| r.to_vec()).collect();
                (w, l.biases.to_vec(), l.activation == Activation::Tanh)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (w, b, tanh) in &self.layers {
            h = w
                .iter()
                .zip(b)
                .map(|(row, bias)| {
                    let mut z = *bias;
                    for (wi, hi) in row.iter().zip(&h) {
                        z += wi * hi;
                    }
                    if *tanh {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
        }
        h
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|(w, b, _)| w.len() * w[0].len() + b.len()).sum()
    }

    /// Mutable access to parameter `k` in layer order, weights row-major
    /// before biases.
    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for (w, b, _) in &mut self.layers {
            let nw = w.len() * w[0].len();
            if k < nw {
                let cols = w[0].len();
                return &mut w[k / cols][k % cols];
            }
            k -= nw;
            if k < b.len() {
                return &mut b[k];
            }
            k -= b.len();
        }
        panic!("parameter index out of range");
    }
}

/// Index of the maximum, first on ties.
pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Nearest hit along a ray against every segment, by direct solve of
/// `o + t·d = a + s·(b − a)`; parallel segments are ignored.
pub fn brute_raycast(segments: &[(P, P)], origin: P, angle: f64, max_range: f64) -> f64 {
    let d = (angle.cos(), angle.sin());
    let mut best = max_range;
    for &(a, b) in segments {
        let e = (b.0 - a.0, b.1 - a.1);
        let det = d.0 * (-e.1) - d.1 * (-e.0);
        if det.abs() < 1e-15 {
            continue;
        }
        let r = (a.0 - origin.0, a.1 - origin.1);
        let t = (r.0 * (-e.1) - r.1 * (-e.0)) / det;
        let s = (d.0 * r.1 - d.1 * r.0) / det;
        if t >= 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s) && t < best {
            best = t;
        }
    }
    best
}

/// Closed edges of an axis-aligned box and of polygons given as vertex lists.
pub fn segments(min: P, max: P, polygons: &[Vec<P>]) -> Vec<(P, P)> {
    let mut out = vec![
        (min, (max.0, min.1)),
        ((max.0, min.1), max),
        (max, (min.0, max.1)),
        ((min.0, max.1), min),
    ];
    for poly in polygons {
        for i in 0..poly.len() {
            out.push((poly[i], poly[(i + 1) % poly.len()]));
        }
    }
    out
}

/// Point in a convex counterclockwise polygon, boundary inclusive.
pub fn in_convex(poly: &[P], p: P) -> bool {
    (0..poly.len()).all(|i| {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0
    })
}

/// Monte-Carlo estimate of the area covered by the union of polygons.
pub fn mc_union_area(min: P, max: P, polygons: &[Vec<P>], samples: usize, rng: &mut impl Rng) -> f64 {
    let hits = (0..samples)
        .filter(|_| {
            let p = (rng.gen_range(min.0..max.0), rng.gen_range(min.1..max.1));
            polygons.iter().any(|poly| in_convex(poly, p))
        })
        .count();
    (max.0 - min.0) * (max.1 - min.1) * hits as f64 / samples as f64
}

fn point_segment(p: P, a: P, b: P) -> f64 {
    let e = (b.0 - a.0, b.1 - a.1);
    let len2 = e.0 * e.0 + e.1 * e.1;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * e.0 + (p.1 - a.1) * e.1) / len2).clamp(0.0, 1.0)
    };
    let q = (a.0 + t * e.0, a.1 + t * e.1);
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

/// Distance between two disjoint convex polygons: minimum over vertex-edge
/// pairs in both directions (0 if either contains a vertex of the other).
pub fn polygon_gap(a: &[P], b: &[P]) -> f64 {
    if a.iter().any(|&p| in_convex(b, p)) || b.iter().any(|&p| in_convex(a, p)) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for (x, y) in [(a, b), (b, a)] {
        for &p in x {
            for i in 0..y.len() {
                best = best.min(point_segment(p, y[i], y[(i + 1) % y.len()]));
            }
        }
    }
    best
}

/// Discounted return-to-go per step, restarting at episode ends and
/// bootstrapping the open tail, written as a forward double loop.
pub fn naive_returns(rewards: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut g = 0.0;
            let mut discount = 1.0;
            let mut k = t;
            loop {
                g += discount * rewards[k];
                if dones[k] {
                    break;
                }
                discount *= gamma;
                k += 1;
                if k == n {
                    g += discount * bootstrap;
                    break;
                }
            }
            g
        })
        .collect()
}

/// GAE written as an explicit sum of discounted TD errors.
pub fn naive_gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let next_value = |k: usize| if dones[k] { 0.0 } else if k + 1 < n { values[k + 1] } else { bootstrap };
    (0..n)
        .map(|t| {
            let mut a = 0.0;
            let mut w = 1.0;
            for k in t..n {
                a += w * (rewards[k] + gamma * next_value(k) - values[k]);
                if dones[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            a
        })
        .collect()
}

/// Fraction of an `n × n` cell-centered grid over `[0,1]²` whose argmax
/// falls in `forbidden`.
pub fn dense_grid_violation(f: impl Fn(&[f64]) -> Vec<f64>, forbidden: &[usize], n: usize) -> f64 {
    let mut bad = 0usize;
    for i in 0..n {
        for j in 0..n {
            let x = [(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64];
            if forbidden.contains(&first_argmax(&f(&x))) {
                bad += 1;
            }
        }
    }
    bad as f64 / (n * n) as f64
}

/// Pearson chi-square statistic.
pub fn chi_square(observed: &[usize], expected: &[f64]) -> f64 {
    observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum()
}

/// Upper 1% critical value of the chi-square distribution with 15 degrees
/// of freedom.
pub const CHI2_15_P01: f64 = 30.578;
