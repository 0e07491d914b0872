//! Forecast sets, grids and the constants that appear in every bound.
//!
//! A [`Space`] bundles the finite action set `A` with the compact convex
//! forecast set `C ⊇ A`. Three shapes are supported: the unit cube
//! `[0,1]^m` (actions `{0,1}^m`), the probability simplex in `R^m` (actions
//! are the unit vectors) and the convex hull of an explicit finite action
//! set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::BinKey;

/// An m-dimensional real vector.
pub type Point = Vec<f64>;

/// Membership tolerance used when validating forecasts against `C`.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

const HULL_PROJECTION_TOL: f64 = 1e-9;
const HULL_PROJECTION_MAX_ITERS: usize = 200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("minimal bounding ball is only available in closed form for cube and simplex spaces")]
    UnsupportedKind,
    #[error("invalid space: {0}")]
    InvalidSpace(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    /// `[0,1]^m` with actions `{0,1}^m`.
    Cube,
    /// The unit simplex of `R^m` with the unit vectors as actions.
    Simplex,
    /// `conv(A)` for an explicit finite `A`.
    Hull,
}

/// Center and radius of a ball containing `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ball {
    pub center: Point,
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct Space {
    dim: usize,
    kind: SpaceKind,
    actions: Vec<Point>,
}

impl Space {
    /// `[0,1]^m`, actions `{0,1}^m` in lexicographic order.
    pub fn cube(dim: usize) -> Result<Self> {
        if dim == 0 || dim > 16 {
            return Err(GeometryError::InvalidSpace(format!("cube dimension {dim} not in 1..=16")));
        }
        let actions = (0..1usize << dim)
            .map(|bits| (0..dim).map(|i| ((bits >> (dim - 1 - i)) & 1) as f64).collect())
            .collect();
        Ok(Self { dim, kind: SpaceKind::Cube, actions })
    }

    /// The unit simplex of `R^m`, actions are the unit vectors in
    /// lexicographic order (`e_m` first).
    pub fn simplex(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(GeometryError::InvalidSpace(format!("simplex needs dimension >= 2, got {dim}")));
        }
        let mut actions: Vec<Point> = (0..dim)
            .map(|i| {
                let mut e = vec![0.0; dim];
                e[i] = 1.0;
                e
            })
            .collect();
        actions.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self { dim, kind: SpaceKind::Simplex, actions })
    }

    /// `conv(actions)`.
    pub fn hull(mut actions: Vec<Point>) -> Result<Self> {
        let dim = actions.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(GeometryError::InvalidSpace("hull needs at least one non-empty action".into()));
        }
        for a in &actions {
            if a.len() != dim {
                return Err(GeometryError::DimensionMismatch { expected: dim, got: a.len() });
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(GeometryError::NonFinite);
            }
        }
        actions.sort_by(|a, b| a.partial_cmp(b).unwrap());
        actions.dedup();
        Ok(Self { dim, kind: SpaceKind::Hull, actions })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    /// The action set `A`, sorted lexicographically.
    pub fn actions(&self) -> &[Point] {
        &self.actions
    }

    /// Extreme points of `C`. For all three kinds these are exactly the
    /// actions.
    pub fn vertices(&self) -> &[Point] {
        &self.actions
    }

    /// `γ = diam(C)`.
    pub fn diameter(&self) -> f64 {
        match self.kind {
            SpaceKind::Cube => (self.dim as f64).sqrt(),
            SpaceKind::Simplex => std::f64::consts::SQRT_2,
            SpaceKind::Hull => {
                let mut best: f64 = 0.0;
                for (i, a) in self.actions.iter().enumerate() {
                    for b in &self.actions[i + 1..] {
                        best = best.max(dist2(a, b));
                    }
                }
                best.sqrt()
            }
        }
    }

    pub fn centroid(&self) -> Point {
        match self.kind {
            SpaceKind::Cube => vec![0.5; self.dim],
            SpaceKind::Simplex => vec![1.0 / self.dim as f64; self.dim],
            SpaceKind::Hull => {
                let n = self.actions.len() as f64;
                let mut c = vec![0.0; self.dim];
                for a in &self.actions {
                    for (ci, ai) in c.iter_mut().zip(a) {
                        *ci += ai / n;
                    }
                }
                c
            }
        }
    }

    /// Minimal bounding ball of `C` in closed form.
    ///
    /// For `[0,1]^m` this is `r² = m/4` around the cube center; for the
    /// simplex it is `r² = 1 − 1/m` around the barycenter.
    pub fn min_bounding_radius(&self) -> Result<Ball> {
        match self.kind {
            SpaceKind::Cube => Ok(Ball { center: vec![0.5; self.dim], radius: (self.dim as f64).sqrt() / 2.0 }),
            SpaceKind::Simplex => {
                Ok(Ball { center: self.centroid(), radius: (1.0 - 1.0 / self.dim as f64).sqrt() })
            }
            SpaceKind::Hull => Err(GeometryError::UnsupportedKind),
        }
    }

    /// [`Space::min_bounding_radius`], falling back to `(centroid, γ)` for
    /// hull spaces.
    pub fn bounding_ball(&self) -> Ball {
        self.min_bounding_radius()
            .unwrap_or_else(|_| Ball { center: self.centroid(), radius: self.diameter() })
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(GeometryError::DimensionMismatch { expected: self.dim, got: z.len() });
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(())
    }

    /// Euclidean projection onto `C`.
    pub fn project(&self, z: &[f64]) -> Result<Point> {
        self.check(z)?;
        Ok(match self.kind {
            SpaceKind::Cube => z.iter().map(|x| x.clamp(0.0, 1.0)).collect(),
            SpaceKind::Simplex => project_simplex(z),
            SpaceKind::Hull => project_hull(&self.actions, z),
        })
    }

    /// Membership in `C` up to [`MEMBERSHIP_TOL`].
    pub fn contains(&self, x: &[f64]) -> bool {
        if self.check(x).is_err() {
            return false;
        }
        match self.kind {
            SpaceKind::Cube => x.iter().all(|v| (-MEMBERSHIP_TOL..=1.0 + MEMBERSHIP_TOL).contains(v)),
            SpaceKind::Simplex => {
                x.iter().all(|v| *v >= -MEMBERSHIP_TOL) && (x.iter().sum::<f64>() - 1.0).abs() <= MEMBERSHIP_TOL
            }
            SpaceKind::Hull => dist(&project_hull(&self.actions, x), x) <= 1e-6,
        }
    }

    /// Membership in `A` (exact up to round-off).
    pub fn is_action(&self, x: &[f64]) -> bool {
        x.len() == self.dim && self.actions.iter().any(|a| dist2(a, x) <= 1e-24)
    }

    /// The action farthest from `c`; ties go to the lexicographically
    /// largest action.
    pub fn farthest_action(&self, c: &[f64]) -> &Point {
        let mut best = &self.actions[0];
        let mut best_d = f64::NEG_INFINITY;
        for a in &self.actions {
            let d = dist2(a, c);
            if d >= best_d - 1e-12 {
                best = a;
                best_d = best_d.max(d);
            }
        }
        best
    }
}

/// Projection onto the unit simplex by the sort-and-threshold rule.
fn project_simplex(z: &[f64]) -> Point {
    let mut u = z.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    z.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Projection onto `conv(vertices)` by away-step Frank–Wolfe on the
/// barycentric weights.
fn project_hull(vertices: &[Point], z: &[f64]) -> Point {
    let k = vertices.len();
    if k == 1 {
        return vertices[0].clone();
    }
    let dim = z.len();
    // start at the vertex closest to z
    let start = (0..k)
        .min_by(|&i, &j| dist2(&vertices[i], z).partial_cmp(&dist2(&vertices[j], z)).unwrap())
        .unwrap();
    let mut w = vec![0.0; k];
    w[start] = 1.0;
    let mut x = vertices[start].clone();
    for _ in 0..HULL_PROJECTION_MAX_ITERS {
        let grad: Vec<f64> = x.iter().zip(z).map(|(a, b)| a - b).collect();
        let scores: Vec<f64> = vertices.iter().map(|v| dot(&grad, v)).collect();
        let gx = dot(&grad, &x);
        let fw = (0..k).min_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap()).unwrap();
        let away = (0..k)
            .filter(|&i| w[i] > 0.0)
            .max_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap())
            .unwrap();
        let fw_gap = gx - scores[fw];
        if fw_gap <= HULL_PROJECTION_TOL * HULL_PROJECTION_TOL {
            break;
        }
        let away_gap = scores[away] - gx;
        let (dir, max_step, toward): (Vec<f64>, f64, Option<usize>) = if fw_gap >= away_gap {
            ((0..dim).map(|d| vertices[fw][d] - x[d]).collect(), 1.0, Some(fw))
        } else {
            let wa: f64 = w[away];
            ((0..dim).map(|d| x[d] - vertices[away][d]).collect(), wa / (1.0 - wa).max(1e-300), None)
        };
        let dd = dot(&dir, &dir);
        if dd <= 0.0 {
            break;
        }
        let step = (-dot(&grad, &dir) / dd).clamp(0.0, max_step);
        match toward {
            Some(i) => {
                for wj in w.iter_mut() {
                    *wj *= 1.0 - step;
                }
                w[i] += step;
            }
            None => {
                for wj in w.iter_mut() {
                    *wj *= 1.0 + step;
                }
                w[away] -= step;
                if w[away] < 1e-15 {
                    w[away] = 0.0;
                }
            }
        }
        for d in 0..dim {
            x[d] += step * dir[d];
        }
    }
    x
}

/// A finite δ-grid of `C`.
#[derive(Clone, Debug)]
pub struct Grid {
    points: Vec<Point>,
    keys: Vec<BinKey>,
    resolution: u32,
    covering_radius: f64,
    delta: f64,
}

/// Slightly inflate a covering radius so that the strict inequality
/// `‖d − c‖ < δ` holds.
fn inflate(radius: f64) -> f64 {
    radius * (1.0 + 1e-9) + 1e-15
}

impl Grid {
    /// Regular lattice with per-axis step `1/resolution`, intersected with
    /// `C`.
    pub fn regular(space: &Space, resolution: u32) -> Result<Self> {
        if resolution == 0 {
            return Err(GeometryError::InvalidGrid("resolution must be at least 1".into()));
        }
        let m = space.dim();
        let res = resolution as f64;
        match space.kind() {
            SpaceKind::Cube => {
                let per_axis = resolution as usize + 1;
                let count = per_axis.checked_pow(m as u32).filter(|&c| c <= 5_000_000);
                let count = count.ok_or_else(|| GeometryError::InvalidGrid("grid too large".into()))?;
                let mut points = Vec::with_capacity(count);
                let mut keys = Vec::with_capacity(count);
                for mut idx in 0..count {
                    let mut k = vec![0i64; m];
                    for slot in k.iter_mut().rev() {
                        *slot = (idx % per_axis) as i64;
                        idx /= per_axis;
                    }
                    points.push(k.iter().map(|&v| v as f64 / res).collect());
                    keys.push(BinKey::Lattice(k));
                }
                let covering = (m as f64).sqrt() / (2.0 * res);
                Ok(Self { points, keys, resolution, covering_radius: covering, delta: inflate(covering) })
            }
            SpaceKind::Simplex => {
                let comps = compositions(resolution as i64, m);
                if comps.len() > 5_000_000 {
                    return Err(GeometryError::InvalidGrid("grid too large".into()));
                }
                let points = comps.iter().map(|k| k.iter().map(|&v| v as f64 / res).collect()).collect();
                let keys = comps.into_iter().map(BinKey::Lattice).collect();
                let covering = simplex_lattice_covering(m) / res;
                Ok(Self { points, keys, resolution, covering_radius: covering, delta: inflate(covering) })
            }
            SpaceKind::Hull => {
                let lo: Vec<f64> =
                    (0..m).map(|d| space.actions().iter().map(|a| a[d]).fold(f64::INFINITY, f64::min)).collect();
                let hi: Vec<f64> =
                    (0..m).map(|d| space.actions().iter().map(|a| a[d]).fold(f64::NEG_INFINITY, f64::max)).collect();
                let per_axis = resolution as usize + 1;
                let count = per_axis
                    .checked_pow(m as u32)
                    .filter(|&c| c <= 200_000)
                    .ok_or_else(|| GeometryError::InvalidGrid("grid too large".into()))?;
                let mut points: Vec<Point> = Vec::new();
                for mut idx in 0..count {
                    let mut q = vec![0.0; m];
                    for d in (0..m).rev() {
                        let k = (idx % per_axis) as f64;
                        idx /= per_axis;
                        q[d] = lo[d] + (hi[d] - lo[d]) * k / res;
                    }
                    let p: Point = space.project(&q)?.iter().map(|v| (v * 1e12).round() / 1e12).collect();
                    points.push(p);
                }
                points.sort_by(|a, b| a.partial_cmp(b).unwrap());
                points.dedup();
                let keys = points.iter().map(|p| BinKey::exact(p)).collect();
                let covering = lo.iter().zip(&hi).map(|(l, h)| ((h - l) / (2.0 * res)).powi(2)).sum::<f64>().sqrt();
                Ok(Self { points, keys, resolution, covering_radius: covering, delta: inflate(covering) })
            }
        }
    }

    /// Build a grid from explicit points (keys are the exact bit patterns).
    pub fn from_points(space: &Space, points: Vec<Point>, delta: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(GeometryError::InvalidGrid("empty grid".into()));
        }
        for p in &points {
            if !space.contains(p) {
                return Err(GeometryError::InvalidGrid(format!("point {p:?} outside the forecast set")));
            }
        }
        let keys: Vec<BinKey> = points.iter().map(|p| BinKey::exact(p)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != keys.len() {
            return Err(GeometryError::InvalidGrid("duplicate points".into()));
        }
        Ok(Self { points, keys, resolution: 0, covering_radius: delta, delta })
    }

    /// Re-key the points by their exact bit patterns, so that keys agree
    /// across nested grids of different resolutions.
    pub fn with_exact_keys(mut self) -> Self {
        self.keys = self.points.iter().map(|p| BinKey::exact(p)).collect();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point {
        &self.points[i]
    }

    pub fn key(&self, i: usize) -> &BinKey {
        &self.keys[i]
    }

    pub fn keys(&self) -> &[BinKey] {
        &self.keys
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    /// Exact covering radius `max_{x∈C} dist(x, D)` (the `δ₀` of the
    /// outgoing construction).
    pub fn covering_radius(&self) -> f64 {
        self.covering_radius
    }

    /// A `δ` with `dist(x, D) < δ` for every `x ∈ C`.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Index of the grid point nearest to `x` (first one on ties).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = dist2(p, x);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

/// `make_grid` entry point.
pub fn make_grid(space: &Space, resolution: u32) -> Result<Grid> {
    Grid::regular(space, resolution)
}

/// All compositions of `total` into `parts` non-negative integers, in
/// lexicographic order.
pub fn compositions(total: i64, parts: usize) -> Vec<Vec<i64>> {
    fn rec(total: i64, parts: usize, prefix: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
        if parts == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=total {
            prefix.push(k);
            rec(total - k, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if parts > 0 {
        rec(total, parts, &mut Vec::with_capacity(parts), &mut out);
    }
    out
}

/// Covering radius of the `A_{m-1}` lattice `{k ∈ Z^m : Σk = 1}`-scaled
/// points (unit resolution), i.e. `sqrt(a(m−a)/m)` with `a = ⌊m/2⌋`.
fn simplex_lattice_covering(m: usize) -> f64 {
    let a = (m / 2) as f64;
    let m = m as f64;
    (a * (m - a) / m).sqrt()
}

/// Relative entropy `D(x‖y) = Σ x_i ln(x_i/y_i)` with `0 ln 0 = 0`;
/// `+∞` when some `y_i = 0 < x_i`.
pub fn kl_divergence(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        if xi > 0.0 {
            if yi <= 0.0 {
                return f64::INFINITY;
            }
            s += xi * (xi / yi).ln();
        }
    }
    s
}

/// Cross entropy `L(a, c) = −Σ a_i ln c_i`.
pub fn cross_entropy(a: &[f64], c: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&ai, &ci) in a.iter().zip(c) {
        if ai > 0.0 {
            if ci <= 0.0 {
                return f64::INFINITY;
            }
            s -= ai * ci.ln();
        }
    }
    s
}

/// Entropy `H(a) = L(a, a)`.
pub fn entropy(a: &[f64]) -> f64 {
    cross_entropy(a, a)
}

/// A finite δ-log-grid of the simplex: a shrunken simplex lattice whose
/// coordinates are all at least `floor`.
#[derive(Clone, Debug)]
pub struct LogGrid {
    points: Vec<Point>,
    keys: Vec<BinKey>,
    floor: f64,
    delta: f64,
}

impl LogGrid {
    /// Simplex lattice of the given resolution mapped affinely onto
    /// `{x ∈ Δ : x_i ≥ floor}`. `delta` is measured as the largest
    /// `min_d D(x‖d)` over a fine lattice of `Δ` (vertices included),
    /// inflated by 5%.
    pub fn new(dim: usize, resolution: u32, floor: f64) -> Result<Self> {
        if dim < 2 || resolution == 0 {
            return Err(GeometryError::InvalidGrid("log-grid needs dim >= 2 and resolution >= 1".into()));
        }
        if !(floor > 0.0 && floor * (dim as f64) < 1.0) {
            return Err(GeometryError::InvalidGrid(format!("floor {floor} must be in (0, 1/{dim})")));
        }
        let scale = 1.0 - floor * dim as f64;
        let comps = compositions(resolution as i64, dim);
        let points: Vec<Point> = comps
            .iter()
            .map(|k| k.iter().map(|&v| floor + scale * v as f64 / resolution as f64).collect())
            .collect();
        let keys = comps.into_iter().map(BinKey::Lattice).collect();
        let mut grid = Self { points, keys, floor, delta: f64::INFINITY };
        grid.delta = grid.measure_covering() * 1.05 + 1e-12;
        Ok(grid)
    }

    fn measure_covering(&self) -> f64 {
        let m = self.dim();
        let mut sample_res: i64 = 4096;
        // keep the number of sample points manageable in higher dimension
        while sample_res > 8 && binomial(sample_res + m as i64 - 1, m as i64 - 1) > 200_000.0 {
            sample_res /= 2;
        }
        let mut worst: f64 = 0.0;
        for k in compositions(sample_res, m) {
            let x: Vec<f64> = k.iter().map(|&v| v as f64 / sample_res as f64).collect();
            let best = self.points.iter().map(|d| kl_divergence(&x, d)).fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
        }
        worst
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point {
        &self.points[i]
    }

    pub fn key(&self, i: usize) -> &BinKey {
        &self.keys[i]
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

fn binomial(n: i64, k: i64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
