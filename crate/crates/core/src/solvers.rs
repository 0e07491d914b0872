//! Zero-sum matrix games and the "outgoing" primitives built on them.

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{dist2, GeometryError, Grid, LogGrid, Point, Space};

/// Largest game solved by exact pivoting; bigger games use multiplicative
/// weights.
pub const EXACT_LIMIT: usize = 200;
pub const EXACT_TOL: f64 = 1e-9;
pub const ITERATIVE_TOL: f64 = 1e-4;
/// Cap on the number of probe points of a `Probe::Grid` certificate.
pub const MAX_PROBE_POINTS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("empty game")]
    Empty,
    #[error("non-finite payoff entry")]
    NonFinite,
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("g has {got} values for a grid of {expected} points")]
    ValueCount { expected: usize, got: usize },
    #[error("g value has a zero coordinate")]
    ZeroCoordinate,
    #[error("certificate {achieved} exceeds target {target}")]
    Uncertified { achieved: f64, target: f64 },
    #[error("no outgoing point found on [{lo}, {hi}]")]
    NoFixedPoint { lo: f64, hi: f64 },
    #[error("pivoting did not terminate")]
    PivotLimit,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// Dense payoff matrix; rows maximize, columns minimize.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGame {
    rows: usize,
    cols: usize,
    payoff: Vec<f64>,
}

impl MatrixGame {
    pub fn new(payoff: Vec<Vec<f64>>) -> Result<Self> {
        let rows = payoff.len();
        let cols = payoff.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || payoff.iter().any(|r| r.len() != cols) {
            return Err(SolverError::Empty);
        }
        let flat: Vec<f64> = payoff.into_iter().flatten().collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite);
        }
        Ok(Self { rows, cols, payoff: flat })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        Self::new((0..rows).map(|i| (0..cols).map(|j| f(i, j)).collect()).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.payoff[i * self.cols + j]
    }

    /// `max_i (A q)_i`: what the column strategy `q` concedes at worst.
    pub fn row_best_response(&self, q: &[f64]) -> f64 {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j) * q[j]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `min_j (pᵀA)_j`: what the row strategy `p` secures at worst.
    pub fn col_best_response(&self, p: &[f64]) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j) * p[i]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Solution of a zero-sum game. `upper` is the exact worst-case payoff of
/// `min_strategy`, `lower` the exact guaranteed payoff of `max_strategy`;
/// the game value lies in `[lower, upper]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GameSolution {
    pub min_strategy: Vec<f64>,
    pub max_strategy: Vec<f64>,
    pub value: f64,
    pub upper: f64,
    pub lower: f64,
}

pub fn solve_zero_sum(game: &MatrixGame, tol: f64) -> Result<GameSolution> {
    if !(tol > 0.0) {
        return Err(SolverError::BadTolerance);
    }
    if game.rows <= EXACT_LIMIT && game.cols <= EXACT_LIMIT {
        solve_exact(game)
    } else {
        Ok(solve_iterative(game, tol.max(ITERATIVE_TOL)))
    }
}

fn normalize(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        for x in v.iter_mut() {
            *x /= s;
        }
    } else {
        let n = v.len() as f64;
        v.iter_mut().for_each(|x| *x = 1.0 / n);
    }
}

/// Dense tableau simplex on `max Σq s.t. Mq ≤ 1, q ≥ 0` with
/// `M = A − min(A) + 1 > 0`.
fn solve_exact(game: &MatrixGame) -> Result<GameSolution> {
    let (r, n) = (game.rows, game.cols);
    let min = game.payoff.iter().cloned().fold(f64::INFINITY, f64::min);
    let shift = 1.0 - min;
    let width = n + r + 1;
    // rows 0..r constraints, row r objective (reduced costs, negated)
    let mut tab = vec![0.0; (r + 1) * width];
    for i in 0..r {
        for j in 0..n {
            tab[i * width + j] = game.get(i, j) + shift;
        }
        tab[i * width + n + i] = 1.0;
        tab[i * width + width - 1] = 1.0;
    }
    for j in 0..n {
        tab[r * width + j] = -1.0;
    }
    let mut basis: Vec<usize> = (n..n + r).collect();
    let max_pivots = 50 * (r + n) + 1000;
    let mut degenerate_run = 0usize;
    let mut pivots = 0usize;
    loop {
        let obj = &tab[r * width..r * width + width - 1];
        let bland = degenerate_run > r + n;
        let entering = if bland {
            obj.iter().position(|&v| v < -1e-12)
        } else {
            let (j, v) = obj
                .iter()
                .enumerate()
                .fold((usize::MAX, -1e-12), |acc, (j, &v)| if v < acc.1 { (j, v) } else { acc });
            (v < -1e-12).then_some(j)
        };
        let Some(e) = entering else { break };
        let mut leave = None;
        let mut best = f64::INFINITY;
        for i in 0..r {
            let a = tab[i * width + e];
            if a > 1e-12 {
                let ratio = tab[i * width + width - 1] / a;
                let better = ratio < best - 1e-15
                    || (ratio <= best + 1e-15 && leave.is_some_and(|l: usize| basis[i] < basis[l]));
                if better {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        // the objective is bounded (M > 0), so a leaving row always exists
        let Some(l) = leave else { return Err(SolverError::PivotLimit) };
        degenerate_run = if best <= 1e-15 { degenerate_run + 1 } else { 0 };
        let p = tab[l * width + e];
        for k in 0..width {
            tab[l * width + k] /= p;
        }
        for i in 0..=r {
            if i == l {
                continue;
            }
            let f = tab[i * width + e];
            if f != 0.0 {
                for k in 0..width {
                    tab[i * width + k] -= f * tab[l * width + k];
                }
            }
        }
        basis[l] = e;
        pivots += 1;
        if pivots > max_pivots {
            return Err(SolverError::PivotLimit);
        }
    }
    let mut q = vec![0.0; n];
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            q[b] = tab[i * width + width - 1];
        }
    }
    let total: f64 = q.iter().sum();
    let mut p: Vec<f64> = (0..r).map(|i| tab[r * width + n + i]).collect();
    normalize(&mut q);
    normalize(&mut p);
    let value = 1.0 / total - shift;
    let upper = game.row_best_response(&q);
    let lower = game.col_best_response(&p);
    Ok(GameSolution { min_strategy: q, max_strategy: p, value, upper, lower })
}

/// Optimistic multiplicative weights for both players, averaged.
fn solve_iterative(game: &MatrixGame, tol: f64) -> GameSolution {
    let (r, n) = (game.rows, game.cols);
    let lo = game.payoff.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = game.payoff.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(1e-12);
    let eta = 0.1 / range;
    let mut lp = vec![0.0; r];
    let mut lq = vec![0.0; n];
    let mut prev_row = vec![0.0; r];
    let mut prev_col = vec![0.0; n];
    let mut avg_p = vec![0.0; r];
    let mut avg_q = vec![0.0; n];
    let softmax = |logits: &[f64], sign: f64| -> Vec<f64> {
        let m = logits.iter().map(|v| sign * v).fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logits.iter().map(|v| (sign * v - m).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        w
    };
    let mut best = (vec![1.0 / n as f64; n], vec![1.0 / r as f64; r], f64::INFINITY, f64::NEG_INFINITY);
    for it in 1..=200_000usize {
        let opt_p: Vec<f64> = lp.iter().zip(&prev_row).map(|(a, b)| a + b).collect();
        let opt_q: Vec<f64> = lq.iter().zip(&prev_col).map(|(a, b)| a + b).collect();
        let p = softmax(&opt_p, eta);
        let q = softmax(&opt_q, -eta);
        let row_pay: Vec<f64> = (0..r).map(|i| (0..n).map(|j| game.get(i, j) * q[j]).sum()).collect();
        let col_pay: Vec<f64> = (0..n).map(|j| (0..r).map(|i| game.get(i, j) * p[i]).sum()).collect();
        for i in 0..r {
            lp[i] += row_pay[i];
            avg_p[i] += p[i];
        }
        for j in 0..n {
            lq[j] += col_pay[j];
            avg_q[j] += q[j];
        }
        prev_row = row_pay;
        prev_col = col_pay;
        if it % 50 == 0 {
            let mut ap = avg_p.clone();
            let mut aq = avg_q.clone();
            normalize(&mut ap);
            normalize(&mut aq);
            let (u, l) = (game.row_best_response(&aq), game.col_best_response(&ap));
            if u - l < best.2 - best.3 {
                best = (aq, ap, u, l);
            }
            if best.2 - best.3 <= tol {
                break;
            }
        }
    }
    let (q, p, upper, lower) = best;
    GameSolution { min_strategy: q, max_strategy: p, value: 0.5 * (upper + lower), upper, lower }
}

/// Rows of the certificate game for [`outgoing_mm`].
#[derive(Clone, Debug)]
pub enum Probe<'a> {
    /// Vertices of `C`. The payoff is affine in `x`, so this certificate is
    /// exact over all of `C`.
    Vertices,
    /// An explicit probe grid `D1`; the certificate over `C` adds the
    /// Lipschitz slack `2γ δ₁`.
    Grid(&'a Grid),
}

/// Finite-support distribution on a grid with a certified guarantee.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutgoingDistribution {
    /// `(grid index, point, probability)`, sorted by grid index.
    pub support: Vec<(usize, Point, f64)>,
    /// Certified bound on the worst expected payoff over `C`.
    pub guarantee: f64,
    /// Worst expected payoff over the probe rows only.
    pub probe_bound: f64,
}

impl OutgoingDistribution {
    fn from_strategy(points: &[Point], q: &[f64], guarantee: f64, probe_bound: f64) -> Self {
        let mut support: Vec<(usize, Point, f64)> = q
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 1e-12)
            .map(|(i, &p)| (i, points[i].clone(), p))
            .collect();
        let s: f64 = support.iter().map(|x| x.2).sum();
        support.iter_mut().for_each(|x| x.2 /= s);
        Self { support, guarantee, probe_bound }
    }

    pub fn point_mass(index: usize, point: Point) -> Self {
        Self { support: vec![(index, point, 1.0)], guarantee: 0.0, probe_bound: 0.0 }
    }

    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    /// Inverse-CDF sample with the uniform variate `u ∈ [0, 1)`.
    pub fn sample(&self, u: f64) -> &(usize, Point, f64) {
        let mut acc = 0.0;
        for entry in &self.support {
            acc += entry.2;
            if u < acc {
                return entry;
            }
        }
        self.support.last().expect("support is nonempty")
    }
}

/// `δ₁ = (δ² − δ₀²)/(4γ)` for the probe grid certificate.
pub fn probe_delta(delta: f64, covering_radius: f64, gamma: f64) -> f64 {
    (delta * delta - covering_radius * covering_radius) / (4.0 * gamma)
}

/// Smallest regular probe grid of `space` that is a `δ₁`-grid, or `None` if
/// it would exceed [`MAX_PROBE_POINTS`].
pub fn probe_grid(space: &Space, delta1: f64) -> Result<Option<Grid>> {
    if !(delta1 > 0.0) {
        return Ok(None);
    }
    let m = space.dim() as f64;
    let res = ((m.sqrt() / (2.0 * delta1)).ceil() as u64).max(1);
    if (res + 1) as f64 > (MAX_PROBE_POINTS as f64).powf(1.0 / m) {
        return Ok(None);
    }
    Ok(Some(Grid::regular(space, res as u32)?))
}

/// Stochastic outgoing distribution: a mixed minimizer strategy `η` on the
/// grid `D` such that `E_η[‖x − y‖² − ‖x − g(y)‖²] ≤ δ²` for every `x ∈ C`.
///
/// `g_values[k]` is `g` at the `k`-th grid point; values are projected into
/// `C` first.
pub fn outgoing_mm(
    space: &Space,
    g_values: &[Point],
    grid: &Grid,
    probe: Probe<'_>,
    tol: f64,
) -> Result<OutgoingDistribution> {
    if g_values.len() != grid.len() {
        return Err(SolverError::ValueCount { expected: grid.len(), got: g_values.len() });
    }
    let g: Vec<Point> = g_values.iter().map(|v| space.project(v)).collect::<std::result::Result<_, _>>()?;
    let target = grid.delta() * grid.delta() + tol;
    // a grid point that g fixes is a zero-payoff pure strategy
    if let Some(k) = (0..grid.len()).find(|&k| g[k] == *grid.point(k)) {
        return Ok(OutgoingDistribution::point_mass(k, grid.point(k).clone()));
    }
    let rows: &[Point] = match probe {
        Probe::Vertices => space.vertices(),
        Probe::Grid(d1) => d1.points(),
    };
    let payoff = |x: &Point, k: usize| dist2(x, grid.point(k)) - dist2(x, &g[k]);
    let game = MatrixGame::from_fn(rows.len(), grid.len(), |i, k| payoff(&rows[i], k))?;
    let sol = solve_zero_sum(&game, tol)?;
    let q = &sol.min_strategy;
    let probe_bound = game.row_best_response(q);
    let guarantee = match probe {
        Probe::Vertices => probe_bound,
        Probe::Grid(d1) => probe_bound + 2.0 * space.diameter() * d1.delta(),
    };
    if guarantee > target {
        return Err(SolverError::Uncertified { achieved: guarantee, target });
    }
    Ok(OutgoingDistribution::from_strategy(grid.points(), q, guarantee, probe_bound))
}

/// Expected outgoing payoff `E_η[‖x − y‖² − ‖x − g(y)‖²]` at a probe `x`.
pub fn outgoing_payoff(dist: &OutgoingDistribution, g_values: &[Point], space: &Space, x: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for (k, y, p) in &dist.support {
        let gk = space.project(&g_values[*k])?;
        s += p * (dist2(x, y) - dist2(x, &gk));
    }
    Ok(s)
}

/// Log analogue of [`outgoing_mm`]: `E_η[L(a, c) − L(a, g(c))] ≤ δ` for
/// every `a ∈ Δ`. The payoff is linear in `a`, so the unit-vector rows
/// certify it exactly.
pub fn outgoing_mm_log(g_values: &[Point], grid: &LogGrid, tol: f64) -> Result<OutgoingDistribution> {
    if g_values.len() != grid.len() {
        return Err(SolverError::ValueCount { expected: grid.len(), got: g_values.len() });
    }
    if g_values.iter().any(|g| g.iter().any(|&v| !(v > 0.0))) {
        return Err(SolverError::ZeroCoordinate);
    }
    let m = grid.dim();
    let target = grid.delta() + tol;
    if let Some(k) = (0..grid.len()).find(|&k| g_values[k] == *grid.point(k)) {
        return Ok(OutgoingDistribution::point_mass(k, grid.point(k).clone()));
    }
    let game =
        MatrixGame::from_fn(m, grid.len(), |j, k| -grid.point(k)[j].ln() + g_values[k][j].ln())?;
    let sol = solve_zero_sum(&game, tol)?;
    let guarantee = game.row_best_response(&sol.min_strategy);
    if guarantee > target {
        return Err(SolverError::Uncertified { achieved: guarantee, target });
    }
    Ok(OutgoingDistribution::from_strategy(grid.points(), &sol.min_strategy, guarantee, guarantee))
}

/// A point `y` with `(g(y) − y)(x − y) ≤ 0` for all `x ∈ [lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FixedPointResult {
    pub y: f64,
    /// `max_{x ∈ [lo,hi]} (x − y)² − (x − g(y))²`.
    pub residual: f64,
}

/// Outgoing fixed point of `g(y) = y + f(y)` on `[lo, hi]`.
///
/// Returns `lo` if `f(lo) ≤ 0`; otherwise the smallest root found by
/// scanning `scan` left to right and bisecting the first sign change to
/// `|f| ≤ tol`; otherwise `hi` (where `f > 0` points outward).
pub fn outgoing_fixed_point_1d(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    scan: &[f64],
    tol: f64,
) -> Result<FixedPointResult> {
    if !(tol > 0.0) {
        return Err(SolverError::BadTolerance);
    }
    let eval = |y: f64| -> Result<f64> {
        let v = f(y);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(SolverError::NonFinite)
        }
    };
    let residual = |y: f64, fy: f64| -> f64 {
        [lo, hi].iter().map(|&x| 2.0 * fy * (x - y) - fy * fy).fold(f64::NEG_INFINITY, f64::max)
    };
    let flo = eval(lo)?;
    if flo <= 0.0 {
        return Ok(FixedPointResult { y: lo, residual: residual(lo, flo) });
    }
    let default_scan: Vec<f64>;
    let points: &[f64] = if scan.is_empty() {
        default_scan = (1..=1024).map(|k| lo + (hi - lo) * k as f64 / 1024.0).collect();
        &default_scan
    } else {
        scan
    };
    let mut left = lo;
    for &p in points.iter().filter(|&&p| p > lo && p <= hi) {
        let fp = eval(p)?;
        if fp <= 0.0 {
            if fp >= -tol {
                return Ok(FixedPointResult { y: p, residual: residual(p, fp) });
            }
            let mut right = p;
            for _ in 0..200 {
                let mid = 0.5 * (left + right);
                if mid <= left || mid >= right {
                    break;
                }
                let fm = eval(mid)?;
                if fm.abs() <= tol {
                    return Ok(FixedPointResult { y: mid, residual: residual(mid, fm) });
                }
                if fm > 0.0 {
                    left = mid;
                } else {
                    right = mid;
                }
            }
            let fr = eval(right)?;
            return Ok(FixedPointResult { y: right, residual: residual(right, fr) });
        }
        left = p;
    }
    let fhi = eval(hi)?;
    if fhi >= 0.0 {
        return Ok(FixedPointResult { y: hi, residual: residual(hi, fhi) });
    }
    Err(SolverError::NoFixedPoint { lo, hi })
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..12, 1usize..12).prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(-1.0..1.0f64, c), r))
    }

    proptest! {
        #[test]
        fn duality_gap_closes(rows in matrix()) {
            let g = MatrixGame::new(rows).unwrap();
            let s = solve_zero_sum(&g, EXACT_TOL).unwrap();
            prop_assert!(s.upper - s.lower <= 2.0 * EXACT_TOL + 1e-9);
            prop_assert!((g.row_best_response(&s.min_strategy) - s.upper).abs() < 1e-12);
            let total: f64 = s.min_strategy.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn fixed_point_is_outgoing(knots in prop::collection::vec(-1.0..1.0f64, 2..8)) {
            let n = knots.len() - 1;
            // piecewise-linear f through the knots on [0, 1]
            let f = |y: f64| {
                let s = y * n as f64;
                let i = (s.floor() as usize).min(n - 1);
                let u = s - i as f64;
                knots[i] * (1.0 - u) + knots[i + 1] * u
            };
            let fp = outgoing_fixed_point_1d(f, 0.0, 1.0, &[], 1e-12).unwrap();
            let fy = f(fp.y);
            for k in 0..=100 {
                let x = k as f64 / 100.0;
                prop_assert!(fy * (x - fp.y) <= 1e-9);
            }
        }
    }
}
