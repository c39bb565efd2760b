//! Behavioral safety verification of policy networks.
//!
//! A [`SafetyProperty`] pairs an input box with a split of the actions into
//! forbidden and allowed sets. A point violates the property when the
//! greedy action (argmax of the logits, lowest index on ties) is forbidden.
//! The verifier bounds the logits over a box, bisects boxes it cannot
//! decide, and reports the fraction of the box's volume that violates.
//!
//! Volumes are fractions of the property's root box. Every bisection halves
//! a box, so a region at depth `d` has volume exactly `2^-d`.

use crate::neural::{argmax, Activation, MlpNetwork, NeuralError};
use crate::sim::{ActionKind, SimParams, N_SCANS, OBS_DIM};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

/// Scan value below which an obstacle counts as near.
pub const NEAR_THRESHOLD: f64 = 0.25;

/// Relative padding applied to affine bounds to absorb rounding.
const AFFINE_PAD: f64 = 1e-12;
/// Absolute padding for tanh images and relaxation offsets.
const TANH_PAD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid property `{name}`: {message}")]
    InvalidProperty { name: String, message: String },
    #[error("network has {net} {what}, property expects {property}")]
    Shape { what: &'static str, net: usize, property: usize },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("property file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, VerifierError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(VerifierError::InvalidBox(format!(
                "bound lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(0.0 <= *l && l <= u && *u <= 1.0) {
                return Err(VerifierError::InvalidBox(format!("dimension {i}: [{l}, {u}] not inside [0, 1]")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[0, 1]^dim`.
    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn point(x: &[f64]) -> Result<Self, VerifierError> {
        Self::new(x.to_vec(), x.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| l + 0.5 * (u - l)).collect()
    }

    pub fn is_point(&self) -> bool {
        self.lower == self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| l <= v && v <= u)
    }

    /// Widest dimension, lowest index on ties.
    pub fn widest_dim(&self) -> usize {
        (0..self.dim()).fold(0, |best, i| if self.width(i) > self.width(best) { i } else { best })
    }

    /// Halves the box along `dim`; the two halves share the midpoint face.
    pub fn bisect(&self, dim: usize) -> (BoxRegion, BoxRegion) {
        let mid = self.lower[dim] + 0.5 * self.width(dim);
        let mut left = self.clone();
        let mut right = self.clone();
        left.upper[dim] = mid;
        right.lower[dim] = mid;
        (left, right)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PropertyFile", into = "PropertyFile")]
pub struct SafetyProperty {
    name: String,
    region: BoxRegion,
    forbidden: Vec<usize>,
    allowed: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PropertyFile {
    name: String,
    lower: Vec<f64>,
    upper: Vec<f64>,
    forbidden: Vec<usize>,
    allowed: Vec<usize>,
}

impl TryFrom<PropertyFile> for SafetyProperty {
    type Error = VerifierError;
    fn try_from(f: PropertyFile) -> Result<Self, Self::Error> {
        SafetyProperty::new(f.name, BoxRegion::new(f.lower, f.upper)?, f.forbidden, f.allowed)
    }
}

impl From<SafetyProperty> for PropertyFile {
    fn from(p: SafetyProperty) -> Self {
        PropertyFile {
            name: p.name,
            lower: p.region.lower,
            upper: p.region.upper,
            forbidden: p.forbidden,
            allowed: p.allowed,
        }
    }
}

impl SafetyProperty {
    /// `forbidden` and `allowed` must be non-empty, disjoint and together
    /// cover `0..n` for some `n`.
    pub fn new(
        name: impl Into<String>,
        region: BoxRegion,
        mut forbidden: Vec<usize>,
        mut allowed: Vec<usize>,
    ) -> Result<Self, VerifierError> {
        let name = name.into();
        let bad = |message: &str| VerifierError::InvalidProperty {
            name: name.clone(),
            message: message.to_owned(),
        };
        forbidden.sort_unstable();
        allowed.sort_unstable();
        if forbidden.is_empty() || allowed.is_empty() {
            return Err(bad("forbidden and allowed sets must both be non-empty"));
        }
        let mut all: Vec<usize> = forbidden.iter().chain(&allowed).copied().collect();
        all.sort_unstable();
        if all.iter().enumerate().any(|(i, &a)| i != a) {
            return Err(bad("forbidden and allowed must partition 0..n without repeats"));
        }
        Ok(Self {
            name,
            region,
            forbidden,
            allowed,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn region(&self) -> &BoxRegion {
        &self.region
    }

    pub fn forbidden(&self) -> &[usize] {
        &self.forbidden
    }

    pub fn allowed(&self) -> &[usize] {
        &self.allowed
    }

    pub fn n_outputs(&self) -> usize {
        self.forbidden.len() + self.allowed.len()
    }

    /// Whether the greedy action at `logits` is forbidden.
    pub fn violated_by(&self, logits: &[f64]) -> bool {
        self.forbidden.binary_search(&argmax(logits)).is_ok()
    }

    fn check_net(&self, net: &MlpNetwork) -> Result<(), VerifierError> {
        if net.input_dim() != self.region.dim() {
            return Err(VerifierError::Shape {
                what: "inputs",
                net: net.input_dim(),
                property: self.region.dim(),
            });
        }
        if net.output_dim() != self.n_outputs() {
            return Err(VerifierError::Shape {
                what: "outputs",
                net: net.output_dim(),
                property: self.n_outputs(),
            });
        }
        Ok(())
    }
}

pub fn load_properties(path: impl AsRef<Path>) -> Result<Vec<SafetyProperty>, VerifierError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| VerifierError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_properties(props: &[SafetyProperty], path: impl AsRef<Path>) -> Result<(), VerifierError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(props)?;
    std::fs::write(path, text).map_err(|source| VerifierError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Ray indices whose angle relative to the heading lies strictly inside
/// `(from, to)` degrees, measured counterclockwise.
pub fn sector_rays(from_deg: f64, to_deg: f64) -> Vec<usize> {
    (0..N_SCANS)
        .filter(|&i| {
            let mut a = 360.0 * i as f64 / N_SCANS as f64;
            if a >= 180.0 {
                a -= 360.0;
            }
            a > from_deg + 1e-9 && a < to_deg - 1e-9
        })
        .collect()
}

/// The five built-in obstacle-avoidance properties `theta0`..`theta4`.
///
/// Near sectors constrain their scans to `[0, 0.25]`; every other input,
/// the goal inputs included, ranges over `[0, 1]`.
pub fn builtin_properties(params: &SimParams) -> Result<Vec<SafetyProperty>, VerifierError> {
    let left = sector_rays(30.0, 120.0);
    let right = sector_rays(-120.0, -30.0);
    let front = sector_rays(-30.0, 30.0);
    let near = |sectors: &[&[usize]]| {
        let mut upper = vec![1.0; OBS_DIM];
        for s in sectors {
            for &i in *s {
                upper[i] = NEAR_THRESHOLD;
            }
        }
        BoxRegion::new(vec![0.0; OBS_DIM], upper)
    };
    let actions = &params.actions;
    let tol = 1e-9;
    let leftward = |k: ActionKind| matches!(k, ActionKind::Translate(d) if d > tol) || k == ActionKind::RotateLeft;
    let rightward = |k: ActionKind| matches!(k, ActionKind::Translate(d) if d < -tol) || k == ActionKind::RotateRight;
    let straight = |k: ActionKind| matches!(k, ActionKind::Translate(d) if d.abs() <= tol);
    let split = |forbid: &dyn Fn(ActionKind) -> bool| {
        let f = actions.indices_where(forbid);
        let a = actions.indices_where(|k| !forbid(k));
        (f, a)
    };
    let specs: [(&str, Vec<&[usize]>, (Vec<usize>, Vec<usize>)); 5] = [
        ("theta0", vec![&left], split(&leftward)),
        ("theta1", vec![&right], split(&rightward)),
        ("theta2", vec![&left, &front], split(&|k| !rightward(k))),
        ("theta3", vec![&right, &front], split(&|k| !leftward(k))),
        ("theta4", vec![&left, &right], split(&|k| !straight(k))),
    ];
    specs
        .into_iter()
        .map(|(name, sectors, (f, a))| SafetyProperty::new(name, near(&sectors)?, f, a))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    Interval,
    #[default]
    LinearRelax,
}

impl BoundMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundMode::Interval => "interval",
            BoundMode::LinearRelax => "linear_relax",
        }
    }
}

impl fmt::Display for BoundMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BoundMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interval" => Ok(BoundMode::Interval),
            "linear_relax" => Ok(BoundMode::LinearRelax),
            other => Err(format!("unknown bound mode `{other}` (expected interval or linear_relax)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Network weights split by sign, prepared once per verification run.
#[derive(Debug, Clone)]
pub struct PreparedNet {
    layers: Vec<PreparedLayer>,
    input_dim: usize,
}

#[derive(Debug, Clone)]
struct PreparedLayer {
    w: Array2<f64>,
    w_pos: Array2<f64>,
    w_neg: Array2<f64>,
    w_abs: Array2<f64>,
    b: Array1<f64>,
    /// Rows with no non-zero weight produce their bias exactly.
    constant_row: Vec<bool>,
    activation: Activation,
}

impl PreparedNet {
    pub fn new(net: &MlpNetwork) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| PreparedLayer {
                w: l.weights.clone(),
                w_pos: l.weights.mapv(|v| v.max(0.0)),
                w_neg: l.weights.mapv(|v| v.min(0.0)),
                w_abs: l.weights.mapv(f64::abs),
                b: l.biases.clone(),
                constant_row: l.weights.axis_iter(Axis(0)).map(|r| r.iter().all(|&v| v == 0.0)).collect(),
                activation: l.activation,
            })
            .collect();
        Self {
            layers,
            input_dim: net.input_dim(),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut h = Array1::from(x.to_vec());
        for l in &self.layers {
            let z = l.w.dot(&h) + &l.b;
            h = match l.activation {
                Activation::Tanh => z.mapv(f64::tanh),
                Activation::Identity => z,
            };
        }
        h.to_vec()
    }

    /// Sound per-logit enclosure over the box.
    pub fn bounds(&self, region: &BoxRegion, mode: BoundMode) -> LogitBounds {
        assert_eq!(region.dim(), self.input_dim, "box dimension");
        let interval = self.interval_pass(region);
        match mode {
            BoundMode::Interval => interval.output,
            BoundMode::LinearRelax => self.symbolic_pass(region, &interval),
        }
    }

    fn interval_pass(&self, region: &BoxRegion) -> IntervalPass {
        let mut lo = Array1::from(region.lower.clone());
        let mut hi = Array1::from(region.upper.clone());
        let mut pre = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (zl, zh) = affine_interval(l, lo.view(), hi.view());
            pre.push((zl.clone(), zh.clone()));
            (lo, hi) = match l.activation {
                Activation::Tanh => (zl.mapv(tanh_down), zh.mapv(tanh_up)),
                Activation::Identity => (zl, zh),
            };
        }
        IntervalPass {
            pre,
            output: LogitBounds {
                lower: lo.to_vec(),
                upper: hi.to_vec(),
            },
        }
    }

    /// Back-substitution-free symbolic propagation: every neuron carries a
    /// linear lower and upper bound in terms of the inputs.
    fn symbolic_pass(&self, region: &BoxRegion, interval: &IntervalPass) -> LogitBounds {
        let d = self.input_dim;
        let in_lo = Array1::from(region.lower.clone());
        let in_hi = Array1::from(region.upper.clone());
        let mut lw = Array2::<f64>::zeros((0, d));
        let mut uw = Array2::<f64>::zeros((0, d));
        let mut lc = Array1::<f64>::zeros(0);
        let mut uc = Array1::<f64>::zeros(0);
        let mut out = (Array1::zeros(0), Array1::zeros(0));
        for (k, (l, (il, ih))) in self.layers.iter().zip(&interval.pre).enumerate() {
            // The input layer is exact: both bounds are `Wx + b`.
            let (plw, puw, plc, puc) = if k == 0 {
                (l.w.clone(), l.w.clone(), l.b.clone(), l.b.clone())
            } else {
                (
                    l.w_pos.dot(&lw) + l.w_neg.dot(&uw),
                    l.w_pos.dot(&uw) + l.w_neg.dot(&lw),
                    l.w_pos.dot(&lc) + l.w_neg.dot(&uc) + &l.b,
                    l.w_pos.dot(&uc) + l.w_neg.dot(&lc) + &l.b,
                )
            };
            let n = l.b.len();
            let mut zl = Array1::zeros(n);
            let mut zh = Array1::zeros(n);
            for j in 0..n {
                let sl = concretize(plw.row(j), plc[j], &in_lo, &in_hi, false);
                let sh = concretize(puw.row(j), puc[j], &in_lo, &in_hi, true);
                zl[j] = sl.max(il[j]);
                zh[j] = sh.min(ih[j]).max(zl[j]);
            }
            match l.activation {
                Activation::Identity => {
                    out = (zl, zh);
                    lw = plw;
                    uw = puw;
                    lc = plc;
                    uc = puc;
                }
                Activation::Tanh => {
                    lw = plw;
                    uw = puw;
                    lc = plc;
                    uc = puc;
                    for j in 0..n {
                        let r = tanh_relaxation(zl[j], zh[j]);
                        lw.row_mut(j).mapv_inplace(|v| v * r.lower_slope);
                        uw.row_mut(j).mapv_inplace(|v| v * r.upper_slope);
                        lc[j] = lc[j] * r.lower_slope + r.lower_offset;
                        uc[j] = uc[j] * r.upper_slope + r.upper_offset;
                    }
                    out = (zl.mapv(tanh_down), zh.mapv(tanh_up));
                }
            }
        }
        let last = &interval.output;
        LogitBounds {
            lower: out.0.iter().zip(&last.lower).map(|(a, b)| a.max(*b)).collect(),
            upper: out.1.iter().zip(&last.upper).map(|(a, b)| a.min(*b)).collect(),
        }
    }
}

struct IntervalPass {
    pre: Vec<(Array1<f64>, Array1<f64>)>,
    output: LogitBounds,
}

fn affine_interval(l: &PreparedLayer, lo: ArrayView1<f64>, hi: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    let c = (&lo + &hi) * 0.5;
    let r = (&hi - &lo) * 0.5;
    let zc = l.w.dot(&c) + &l.b;
    let zr = l.w_abs.dot(&r);
    let mag = l.w_abs.dot(&(c.mapv(f64::abs) + &r));
    let mut zl = Array1::zeros(zc.len());
    let mut zh = Array1::zeros(zc.len());
    for j in 0..zc.len() {
        if l.constant_row[j] {
            zl[j] = l.b[j];
            zh[j] = l.b[j];
        } else {
            let pad = AFFINE_PAD * (mag[j] + l.b[j].abs());
            zl[j] = zc[j] - zr[j] - pad;
            zh[j] = zc[j] + zr[j] + pad;
        }
    }
    (zl, zh)
}

fn concretize(w: ArrayView1<f64>, c: f64, lo: &Array1<f64>, hi: &Array1<f64>, upper: bool) -> f64 {
    let mut acc = c;
    let mut mag = c.abs();
    for ((&wi, &l), &h) in w.iter().zip(lo).zip(hi) {
        let pick = if (wi >= 0.0) == upper { h } else { l };
        acc += wi * pick;
        mag += (wi * pick).abs();
    }
    let pad = AFFINE_PAD * mag;
    if upper {
        acc + pad
    } else {
        acc - pad
    }
}

fn tanh_down(z: f64) -> f64 {
    (z.tanh() - TANH_PAD).max(-1.0)
}

fn tanh_up(z: f64) -> f64 {
    (z.tanh() + TANH_PAD).min(1.0)
}

fn dtanh(z: f64) -> f64 {
    let t = z.tanh();
    1.0 - t * t
}

/// Linear functions `a·z + b` bounding tanh on `[l, u]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanhRelaxation {
    pub lower_slope: f64,
    pub lower_offset: f64,
    pub upper_slope: f64,
    pub upper_offset: f64,
}

/// Chord/tangent envelopes on the convex (`u ≤ 0`) and concave (`l ≥ 0`)
/// sides; across zero both lines use the smaller endpoint derivative, which
/// makes `tanh(z) − αz` monotone on the interval.
pub fn tanh_relaxation(l: f64, u: f64) -> TanhRelaxation {
    debug_assert!(l <= u);
    let parallel = || {
        let a = dtanh(l).min(dtanh(u));
        TanhRelaxation {
            lower_slope: a,
            lower_offset: l.tanh() - a * l - TANH_PAD,
            upper_slope: a,
            upper_offset: u.tanh() - a * u + TANH_PAD,
        }
    };
    if u - l < 1e-9 || (l < 0.0 && u > 0.0) {
        return parallel();
    }
    let chord = (u.tanh() - l.tanh()) / (u - l);
    let m = 0.5 * (l + u);
    let tangent = dtanh(m);
    let tangent_offset = m.tanh() - tangent * m;
    let chord_offset = l.tanh() - chord * l;
    if u <= 0.0 {
        TanhRelaxation {
            lower_slope: tangent,
            lower_offset: tangent_offset - TANH_PAD,
            upper_slope: chord,
            upper_offset: chord_offset + TANH_PAD,
        }
    } else {
        TanhRelaxation {
            lower_slope: chord,
            lower_offset: chord_offset - TANH_PAD,
            upper_slope: tangent,
            upper_offset: tangent_offset + TANH_PAD,
        }
    }
}

/// One-shot bound propagation; prefer [`PreparedNet`] in loops.
pub fn propagate_bounds(
    net: &MlpNetwork,
    region: &BoxRegion,
    mode: BoundMode,
) -> Result<LogitBounds, VerifierError> {
    if net.input_dim() != region.dim() {
        return Err(VerifierError::Shape {
            what: "inputs",
            net: net.input_dim(),
            property: region.dim(),
        });
    }
    Ok(PreparedNet::new(net).bounds(region, mode))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Safe,
    Violating,
    Undecided,
}

fn decide_prepared(net: &PreparedNet, prop: &SafetyProperty, region: &BoxRegion, mode: BoundMode) -> Decision {
    if region.is_point() {
        return if prop.violated_by(&net.logits(region.lower())) {
            Decision::Violating
        } else {
            Decision::Safe
        };
    }
    let interval = net.interval_pass(region);
    match (decide_bounds(prop, &interval.output), mode) {
        (Decision::Undecided, BoundMode::LinearRelax) => {
            decide_bounds(prop, &net.symbolic_pass(region, &interval))
        }
        (d, _) => d,
    }
}

fn decide_bounds(prop: &SafetyProperty, b: &LogitBounds) -> Decision {
    let max_upper = |set: &[usize]| set.iter().map(|&i| b.upper[i]).fold(f64::NEG_INFINITY, f64::max);
    let forbidden_top = max_upper(&prop.forbidden);
    if prop.allowed.iter().any(|&a| b.lower[a] > forbidden_top) {
        return Decision::Safe;
    }
    let allowed_top = max_upper(&prop.allowed);
    if prop.forbidden.iter().any(|&f| b.lower[f] > allowed_top) {
        return Decision::Violating;
    }
    Decision::Undecided
}

/// Safe when some allowed logit provably beats every forbidden one;
/// violating when some forbidden logit provably beats every allowed one.
pub fn decide_region(
    net: &MlpNetwork,
    prop: &SafetyProperty,
    region: &BoxRegion,
    mode: BoundMode,
) -> Result<Decision, VerifierError> {
    prop.check_net(net)?;
    if region.dim() != prop.region.dim() {
        return Err(VerifierError::InvalidBox("region and property dimensions differ".into()));
    }
    Ok(decide_prepared(&PreparedNet::new(net), prop, region, mode))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierBudget {
    pub max_depth: u32,
    pub max_regions: usize,
    /// Leaf width per dimension as a fraction of the root box width.
    pub resolution: f64,
}

impl Default for VerifierBudget {
    fn default() -> Self {
        Self {
            max_depth: 20,
            max_regions: 1_000_000,
            resolution: 1.0 / 64.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub property: String,
    /// `proven_violating_volume + estimated_violating_volume`.
    pub violation_rate: f64,
    pub proven_safe_volume: f64,
    pub proven_violating_volume: f64,
    /// Volume of leaves left undecided; their centers were classified.
    pub undecided_volume: f64,
    /// Part of `undecided_volume` whose center point violates.
    pub estimated_violating_volume: f64,
    pub regions: usize,
    pub max_depth: u32,
    /// Depth or region cap hit before every leaf reached the resolution.
    pub partial: bool,
}

#[derive(Debug, Clone)]
pub struct LeafRecord {
    pub region: BoxRegion,
    pub depth: u32,
    pub decision: Decision,
}

pub fn violation_rate(
    net: &MlpNetwork,
    prop: &SafetyProperty,
    budget: &VerifierBudget,
    mode: BoundMode,
) -> Result<VerdictReport, VerifierError> {
    violation_rate_with_leaves(net, prop, budget, mode, |_| {})
}

/// [`violation_rate`] that reports every decided or estimated leaf.
pub fn violation_rate_with_leaves(
    net: &MlpNetwork,
    prop: &SafetyProperty,
    budget: &VerifierBudget,
    mode: BoundMode,
    mut on_leaf: impl FnMut(LeafRecord),
) -> Result<VerdictReport, VerifierError> {
    prop.check_net(net)?;
    let prepared = PreparedNet::new(net);
    let root = &prop.region;
    let leaf_width: Vec<f64> = (0..root.dim()).map(|i| root.width(i) * budget.resolution).collect();
    let at_resolution = |b: &BoxRegion| (0..b.dim()).all(|i| b.width(i) <= leaf_width[i]);

    let mut report = VerdictReport {
        property: prop.name.clone(),
        violation_rate: 0.0,
        proven_safe_volume: 0.0,
        proven_violating_volume: 0.0,
        undecided_volume: 0.0,
        estimated_violating_volume: 0.0,
        regions: 0,
        max_depth: 0,
        partial: false,
    };
    let mut stack = vec![(root.clone(), 0u32)];
    while let Some((b, depth)) = stack.pop() {
        let vol = 0.5f64.powi(depth as i32);
        let decision = if report.regions >= budget.max_regions {
            report.partial = true;
            Decision::Undecided
        } else {
            report.regions += 1;
            report.max_depth = report.max_depth.max(depth);
            match decide_prepared(&prepared, prop, &b, mode) {
                Decision::Undecided if !at_resolution(&b) && depth < budget.max_depth => {
                    let (left, right) = b.bisect(b.widest_dim());
                    stack.push((right, depth + 1));
                    stack.push((left, depth + 1));
                    continue;
                }
                Decision::Undecided => {
                    report.partial |= !at_resolution(&b);
                    Decision::Undecided
                }
                d => d,
            }
        };
        match decision {
            Decision::Safe => report.proven_safe_volume += vol,
            Decision::Violating => report.proven_violating_volume += vol,
            Decision::Undecided => {
                report.undecided_volume += vol;
                if prop.violated_by(&prepared.logits(&b.center())) {
                    report.estimated_violating_volume += vol;
                }
            }
        }
        on_leaf(LeafRecord {
            region: b,
            depth,
            decision,
        });
    }
    report.violation_rate = report.proven_violating_volume + report.estimated_violating_volume;
    Ok(report)
}

/// Reports for every network of every group, mirrored into a table with
/// one row per property plus a `mean` row and one mean/std column pair per
/// group.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub groups: Vec<String>,
    pub properties: Vec<String>,
    /// `reports[g][n][p]`: group, network, property.
    pub reports: Vec<Vec<Vec<VerdictReport>>>,
}

pub fn verify_suite(
    groups: &[(String, Vec<MlpNetwork>)],
    props: &[SafetyProperty],
    budget: &VerifierBudget,
    mode: BoundMode,
) -> Result<SuiteResult, VerifierError> {
    let jobs: Vec<(usize, usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, (_, nets))| {
            (0..nets.len()).flat_map(move |n| (0..props.len()).map(move |p| (g, n, p)))
        })
        .collect();
    let done: Vec<VerdictReport> = jobs
        .par_iter()
        .map(|&(g, n, p)| violation_rate(&groups[g].1[n], &props[p], budget, mode))
        .collect::<Result<_, _>>()?;
    let mut it = done.into_iter();
    let reports = groups
        .iter()
        .map(|(_, nets)| nets.iter().map(|_| it.by_ref().take(props.len()).collect()).collect())
        .collect();
    Ok(SuiteResult {
        groups: groups.iter().map(|(g, _)| g.clone()).collect(),
        properties: props.iter().map(|p| p.name.clone()).collect(),
        reports,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SuiteResult {
    /// Violation rates (fractions) of one group for property `p`, or the
    /// per-network mean over all properties when `p` is `None`.
    pub fn rates(&self, group: usize, p: Option<usize>) -> Vec<f64> {
        self.reports[group]
            .iter()
            .map(|net| match p {
                Some(p) => net[p].violation_rate,
                None => net.iter().map(|r| r.violation_rate).sum::<f64>() / net.len() as f64,
            })
            .collect()
    }

    /// Table in percent: `property,<group>_mean,<group>_std,...`.
    pub fn write_table_csv(&self, w: impl Write) -> Result<(), VerifierError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["property".to_owned()];
        for g in &self.groups {
            header.push(format!("{g}_mean"));
            header.push(format!("{g}_std"));
        }
        out.write_record(&header)?;
        let rows = (0..self.properties.len()).map(Some).chain(std::iter::once(None));
        for p in rows {
            let mut rec = vec![p.map_or("mean".to_owned(), |p| self.properties[p].clone())];
            for g in 0..self.groups.len() {
                let (m, s) = mean_std(&self.rates(g, p));
                rec.push((100.0 * m).to_string());
                rec.push((100.0 * s).to_string());
            }
            out.write_record(&rec)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// One row per (group, network, property).
    pub fn write_reports_csv(&self, w: impl Write) -> Result<(), VerifierError> {
        #[derive(Serialize)]
        struct Row<'a> {
            group: &'a str,
            net: usize,
            property: &'a str,
            violation_rate: f64,
            proven_safe_volume: f64,
            proven_violating_volume: f64,
            undecided_volume: f64,
            estimated_violating_volume: f64,
            regions: usize,
            max_depth: u32,
            partial: bool,
        }
        let mut out = csv::Writer::from_writer(w);
        for (g, nets) in self.reports.iter().enumerate() {
            for (n, reports) in nets.iter().enumerate() {
                for r in reports {
                    out.serialize(Row {
                        group: &self.groups[g],
                        net: n,
                        property: &r.property,
                        violation_rate: r.violation_rate,
                        proven_safe_volume: r.proven_safe_volume,
                        proven_violating_volume: r.proven_violating_volume,
                        undecided_volume: r.undecided_volume,
                        estimated_violating_volume: r.estimated_violating_volume,
                        regions: r.regions,
                        max_depth: r.max_depth,
                        partial: r.partial,
                    })?;
                }
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
