//! Forecasting procedures behind one online interface.
//!
//! Every procedure alternates strictly: `next` (emit `c_t` given the side
//! forecasts `b_t`) then `update` (reveal `a_t`). The action of the current
//! period is never visible to `next`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::binning::{joint_key, BinKey, BinTable, BinningError, FractionalBinning};
use crate::geometry::{dist2, GeometryError, Grid, LogGrid, Point, Space, SpaceKind};
use crate::scores::{FractionalLedger, ScoreError};
use crate::solvers::{
    outgoing_fixed_point_1d, outgoing_mm, outgoing_mm_log, OutgoingDistribution, Probe, SolverError, EXACT_TOL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProcedureError {
    #[error("{0} called out of order")]
    OutOfOrder(&'static str),
    #[error("expected {expected} side forecasts, got {got}")]
    SideArity { expected: usize, got: usize },
    #[error("side forecast required")]
    MissingSide,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Binning(#[from] BinningError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

pub type Result<T> = std::result::Result<T, ProcedureError>;

/// What a procedure emits for one period.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForecastDecision {
    pub forecast: Point,
    /// Key of the forecast's bin in the forecaster's own binning.
    pub key: BinKey,
    /// Distribution the forecast was drawn from, for stochastic procedures.
    pub distribution: Option<OutgoingDistribution>,
    /// Uniform variate consumed by the draw.
    pub draw: Option<f64>,
}

impl ForecastDecision {
    /// What an adaptive adversary may see before choosing `a_t`: the forecast
    /// itself, or the mean of the distribution for randomized procedures (the
    /// draw stays private).
    pub fn visible(&self) -> Point {
        match &self.distribution {
            Some(d) => {
                let mut mean = vec![0.0; self.forecast.len()];
                for (_, p, w) in &d.support {
                    for (m, x) in mean.iter_mut().zip(p) {
                        *m += w * x;
                    }
                }
                mean
            }
            None => self.forecast.clone(),
        }
    }

    fn deterministic(forecast: Point) -> Self {
        let key = BinKey::exact(&forecast);
        Self { forecast, key, distribution: None, draw: None }
    }
}

pub trait Forecaster: Send {
    fn name(&self) -> &'static str;
    fn next(&mut self, side: &[BinKey]) -> Result<ForecastDecision>;
    fn update(&mut self, a: &[f64]) -> Result<()>;
}

/// Enforces the `next`/`update` alternation and carries state between them.
#[derive(Clone, Debug)]
struct Turn<T> {
    pending: Option<T>,
}

impl<T> Default for Turn<T> {
    fn default() -> Self {
        Self { pending: None }
    }
}

impl<T> Turn<T> {
    fn begin(&mut self, v: T) -> Result<()> {
        if self.pending.is_some() {
            return Err(ProcedureError::OutOfOrder("next"));
        }
        self.pending = Some(v);
        Ok(())
    }

    fn check_idle(&self) -> Result<()> {
        if self.pending.is_some() {
            Err(ProcedureError::OutOfOrder("next"))
        } else {
            Ok(())
        }
    }

    fn finish(&mut self) -> Result<T> {
        self.pending.take().ok_or(ProcedureError::OutOfOrder("update"))
    }
}

/// Checks that every period supplies the same number of side forecasts.
#[derive(Clone, Debug, Default)]
struct SideArity {
    expected: Option<usize>,
}

impl SideArity {
    fn check(&mut self, side: &[BinKey]) -> Result<()> {
        if side.is_empty() {
            return Err(ProcedureError::MissingSide);
        }
        match self.expected {
            Some(n) if n != side.len() => Err(ProcedureError::SideArity { expected: n, got: side.len() }),
            _ => {
                self.expected = Some(side.len());
                Ok(())
            }
        }
    }
}

/// Bin key of the joint side binning; a single side forecast is its own key.
fn side_key(side: &[BinKey]) -> BinKey {
    if side.len() == 1 {
        side[0].clone()
    } else {
        joint_key(side)
    }
}

fn check_action(space: &Space, a: &[f64]) -> Result<()> {
    if a.len() != space.dim() {
        return Err(GeometryError::DimensionMismatch { expected: space.dim(), got: a.len() }.into());
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite.into());
    }
    Ok(())
}

/// `c_t = ā_{t−1}(b_t)`: the average action of the current side bin.
///
/// With several side forecasts the bins are the joint tuples. Optionally
/// rounds each forecast to the nearest point of a grid.
#[derive(Clone, Debug)]
pub struct SimpleCalibeat {
    space: Space,
    table: BinTable,
    rounding: Option<Grid>,
    arity: SideArity,
    turn: Turn<BinKey>,
    name: &'static str,
}

impl SimpleCalibeat {
    pub fn new(space: &Space) -> Self {
        Self {
            space: space.clone(),
            table: BinTable::new(space.centroid()),
            rounding: None,
            arity: SideArity::default(),
            turn: Turn::default(),
            name: "simple_calibeat",
        }
    }

    /// Simple calibeating on the joint binning of N side forecasts.
    pub fn multi(space: &Space) -> Self {
        Self { name: "multi_simple", ..Self::new(space) }
    }

    /// Round forecasts to the nearest point of `grid`.
    pub fn with_rounding(mut self, grid: Grid) -> Self {
        self.rounding = Some(grid);
        self
    }

    pub fn rounding(&self) -> Option<&Grid> {
        self.rounding.as_ref()
    }

    pub fn table(&self) -> &BinTable {
        &self.table
    }
}

impl Forecaster for SimpleCalibeat {
    fn name(&self) -> &'static str {
        self.name
    }

    fn next(&mut self, side: &[BinKey]) -> Result<ForecastDecision> {
        self.turn.check_idle()?;
        self.arity.check(side)?;
        let key = side_key(side);
        let c = self.table.average(&key);
        let decision = match &self.rounding {
            Some(grid) => {
                let k = grid.nearest(&c);
                ForecastDecision { forecast: grid.point(k).clone(), key: grid.key(k).clone(), distribution: None, draw: None }
            }
            None => ForecastDecision::deterministic(c),
        };
        self.turn.begin(key)?;
        Ok(decision)
    }

    fn update(&mut self, a: &[f64]) -> Result<()> {
        check_action(&self.space, a)?;
        let key = self.turn.finish()?;
        self.table.observe(key, a)?;
        Ok(())
    }
}

/// `c'_t = (1 − 1/n) ā_{t−1}(b_t) + (1/n) c⁰` where `n` counts the current
/// period in the bin and `c⁰` is the center of the minimal bounding ball.
#[derive(Clone, Debug)]
pub struct CenteredCalibeat {
    space: Space,
    center: Point,
    table: BinTable,
    arity: SideArity,
    turn: Turn<BinKey>,
}

impl CenteredCalibeat {
    pub fn new(space: &Space) -> Result<Self> {
        let ball = space.min_bounding_radius()?;
        Ok(Self {
            space: space.clone(),
            table: BinTable::new(ball.center.clone()),
            center: ball.center,
            arity: SideArity::default(),
            turn: Turn::default(),
        })
    }
}

impl Forecaster for CenteredCalibeat {
    fn name(&self) -> &'static str {
        "centered_calibeat"
    }

    fn next(&mut self, side: &[BinKey]) -> Result<ForecastDecision> {
        self.turn.check_idle()?;
        self.arity.check(side)?;
        let key = side_key(side);
        let n = self.table.count(&key) + 1.0;
        let c = if n == 1.0 {
            self.center.clone()
        } else {
            let avg = self.table.average(&key);
            avg.iter().zip(&self.center).map(|(a, c0)| (1.0 - 1.0 / n) * a + c0 / n).collect()
        };
        self.turn.begin(key)?;
        Ok(ForecastDecision::deterministic(c))
    }

    fn update(&mut self, a: &[f64]) -> Result<()> {
        check_action(&self.space, a)?;
        let key = self.turn.finish()?;
        self.table.observe(key, a)?;
        Ok(())
    }
}

/// Grid used by the calibrated procedures: fixed, or nested doubling grids
/// with `|D_t| ≤ max(⌈√t⌉, 2^m)`.
#[derive(Clone, Debug)]
pub enum GridSchedule {
    Fixed(Grid),
    Doubling,
}

#[derive(Clone, Debug)]
struct GridState {
    schedule: GridSchedule,
    current: Grid,
}

impl GridState {
    fn new(space: &Space, schedule: GridSchedule) -> Result<Self> {
        let current = match &schedule {
            GridSchedule::Fixed(g) => g.clone(),
            GridSchedule::Doubling => Grid::regular(space, 1)?.with_exact_keys(),
        };
        Ok(Self { schedule, current })
    }

    fn grid_at(&mut self, space: &Space, t: usize) -> Result<&Grid> {
        if let GridSchedule::Doubling = self.schedule {
            let cap = ((t as f64).sqrt().ceil() as usize).max(space.actions().len());
            let mut res = self.current.resolution().max(1);
            loop {
                let next = Grid::regular(space, res * 2)?;
                if next.len() > cap {
                    break;
                }
                res *= 2;
            }
            if res != self.current.resolution() {
                self.current = Grid::regular(space, res)?.with_exact_keys();
            }
        }
        Ok(&self.current)
    }
}

/// Self-calibeating by outgoing minimax: each period solves the outgoing
/// game for `g(c) = ā_{t−1}(c)` on the grid and samples `c_t ∼ η`.
#[derive(Clone, Debug)]
pub struct CalibratedForecaster {
    space: Space,
    grid: GridState,
    table: BinTable,
    rng: ChaCha8Rng,
    probe: Option<Grid>,
    tol: f64,
    t: usize,
    side_bins: bool,
    arity: SideArity,
    turn: Turn<BinKey>,
}

impl CalibratedForecaster {
    pub fn new(space: &Space, grid: Grid, seed: u64) -> Result<Self> {
        Self::scheduled(space, GridSchedule::Fixed(grid), seed)
    }

    pub fn scheduled(space: &Space, schedule: GridSchedule, seed: u64) -> Result<Self> {
        Ok(Self {
            space: space.clone(),
            grid: GridState::new(space, schedule)?,
            table: BinTable::new(space.centroid()),
            rng: ChaCha8Rng::seed_from_u64(seed),
            probe: None,
            tol: EXACT_TOL,
            t: 0,
            side_bins: false,
            arity: SideArity::default(),
            turn: Turn::default(),
        })
    }

    /// Certify on an explicit probe grid instead of the vertices of `C`.
    pub fn with_probe_grid(mut self, probe: Grid) -> Self {
        self.probe = Some(probe);
        self
    }

    /// Current grid.
    pub fn grid(&self) -> &Grid {
        &self.grid.current
    }
}

impl CalibratedForecaster {
    fn decide(&mut self, side: Option<BinKey>) -> Result<ForecastDecision> {
        self.turn.check_idle()?;
        self.t += 1;
        let grid = self.grid.grid_at(&self.space, self.t)?.clone();
        let bin = |k: usize| match &side {
            Some(b) => BinKey::Joint(vec![b.clone(), grid.key(k).clone()]),
            None => grid.key(k).clone(),
        };
        let g: Vec<Point> = (0..grid.len()).map(|k| self.table.average(&bin(k))).collect();
        let probe = match &self.probe {
            Some(p) => Probe::Grid(p),
            None => Probe::Vertices,
        };
        let eta = outgoing_mm(&self.space, &g, &grid, probe, self.tol)?;
        let u: f64 = self.rng.gen();
        let (k, point, _) = eta.sample(u).clone();
        self.turn.begin(bin(k))?;
        Ok(ForecastDecision { forecast: point, key: grid.key(k).clone(), distribution: Some(eta), draw: Some(u) })
    }
}

impl Forecaster for CalibratedForecaster {
    fn name(&self) -> &'static str {
        if self.side_bins {
            "calibrated_calibeat"
        } else {
            "calibrated_forecaster"
        }
    }

    fn next(&mut self, side: &[BinKey]) -> Result<ForecastDecision> {
        if self.side_bins {
            self.turn.check_idle()?;
            self.arity.check(side)?;
            self.decide(Some(side_key(side)))
        } else {
            self.decide(None)
        }
    }

    fn update(&mut self, a: &[f64]) -> Result<()> {
        check_action(&self.space, a)?;
        let key = self.turn.finish()?;
        self.table.observe(key, a)?;
        Ok(())
    }
}

/// Calibeating and calibration at once: the outgoing game is solved for
/// `g(c) = ā_{t−1}(b_t, c)` over the joint `(b, c)` bins.
pub struct CalibratedCalibeat;

impl CalibratedCalibeat {
    #[allow(clippy::new_ret_no_self)]
    pub fn new(space: &Space, grid: Grid, seed: u64) -> Result<CalibratedForecaster> {
        Ok(CalibratedForecaster { side_bins: true, ..CalibratedForecaster::new(space, grid, seed)? })
    }
}

/// Deterministic continuous calibeating in dimension 1.
///
/// Each period finds an outgoing fixed point of `c ↦ c + h(c)` with
/// `h(c) = Σ_i w_i(c) e_{t−1}(b_t, i)`, so that
/// `(a − c) h(c) ≤ 0` for every action `a`.
#[derive(Clone, Debug)]
pub struct ContinuousCalibeat1d {
    space: Space,
    ledger: FractionalLedger,
    scan: Vec<f64>,
    previous: Point,
    tol: f64,
    accumulated_slack: f64,
    arity: SideArity,
    turn: Turn<(BinKey, Point)>,
}

impl ContinuousCalibeat1d {
    pub fn new(space: &Space, binning: FractionalBinning) -> Result<Self> {
        if space.dim() != 1 || space.kind() == SpaceKind::Simplex {
            return Err(ProcedureError::InvalidParam("continuous calibeating needs a 1-dimensional space".into()));
        }
        let lo = space.vertices()[0][0];
        let hi = space.vertices().last().unwrap()[0];
        let mut scan: Vec<f64> = binning.knots().map(|k| k.to_vec()).unwrap_or_default();
        scan.push(hi);
        scan.retain(|&x| x > lo && x <= hi);
        scan.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scan.dedup();
        Ok(Self {
            space: space.clone(),
            ledger: FractionalLedger::new(1, binning),
            scan,
            previous: space.centroid(),
            tol: 1e-12,
            accumulated_slack: 0.0,
            arity: SideArity::default(),
            turn: Turn::default(),
        })
    }

    /// `Σ_s 2γ|h(c_s)|` over periods that stopped at an interior root; bounds
    /// the total violation of the per-step inequality.
    pub fn accumulated_slack(&self) -> f64 {
        self.accumulated_slack
    }

    pub fn ledger(&self) -> &FractionalLedger {
        &self.ledger
    }

    fn h(&self, b: &BinKey, c: f64) -> f64 {
        self.ledger.binning().weights(&[c]).iter().map(|(i, w)| w * self.ledger.e(b, i)[0]).sum()
    }
}

impl Forecaster for ContinuousCalibeat1d {
    fn name(&self) -> &'static str {
        "continuous_calibeat_1d"
    }

    fn next(&mut self, side: &[BinKey]) -> Result<ForecastDecision> {
        self.turn.check_idle()?;
        self.arity.check(side)?;
        let b = side_key(side);
        let all_zero = self.ledger.table().iter().all(|(k, s)| {
            !matches!(k, BinKey::Joint(parts) if parts.first() == Some(&b)) || s.mean[0] == 0.0
        });
        let c = if all_zero {
            self.previous.clone()
        } else {
            let lo = self.space.vertices()[0][0];
            let hi = self.space.vertices().last().unwrap()[0];
            let fp = outgoing_fixed_point_1d(|y| self.h(&b, y), lo, hi, &self.scan, self.tol)?;
            if fp.y > lo && fp.y < hi {
                self.accumulated_slack += 2.0 * self.space.diameter() * self.h(&b, fp.y).abs();
            }
            vec![fp.y]
        };
        self.previous = c.clone();
        self.turn.begin((b, c.clone()))?;
        Ok(ForecastDecision::deterministic(c))
    }

    fn update(&mut self, a: &[f64]) -> Result<()> {
        check_action(&self.space, a)?;
        let (b, c) = self.turn.finish()?;
        self.ledger.record(a, &c, &b)?;
        Ok(())
    }
}

/// Multi-calibeating by Blackwell approachability of the negative orthant
/// with payoff `x^n_t = ‖a_t − c_t‖² − ‖a_t − ā^n_{t−1}(b^n_t)‖²`.
#[derive(Clone, Debug)]
pub struct MultiBlackwell {
    space: Space,
    tables: Vec<BinTable>,
    x_sum: Vec<f64>,
    t: usize,
    arity: SideArity,
    turn: Turn<(Vec<BinKey>, Point, Vec<Point>)>,
}

impl MultiBlackwell {
    pub fn new(space: &Space, n_experts: usize) -> Result<Self> {
        if n_experts == 0 {
            return Err(ProcedureError::InvalidParam("need at least one expert".into()));
        }
        Ok(Self {
            space: space.clone(),
            tables: vec![BinTable::new(space.centroid()); n_experts],
            x_sum: vec![0.0; n_experts],
            t: 0,
            arity: SideArity { expected: Some(n_experts) },
            turn: Turn::default(),
        })
    }

    /// `x̄_t`.
    pub fn xbar(&self) -> Vec<f64> {
        let t = self.t.max(1) as f64;
        self.x_sum.iter().map(|x| x / t).collect()
    }

    /// `dist²(x̄_t, R^N_−) = ‖[x̄_t]_+‖²`.
    pub fn dist2_to_orthant(&self) -> f64 {
        self.xbar().iter().map(|x| x.max(0.0).powi(2)).sum()
    }
}

impl Forecaster for MultiBlackwell {
    fn name(&self) -> &'static str {
        "multi_blackwell"
    }

    fn next(&mut self, side: &[BinKey]) -> Result<ForecastDecision> {
        self.turn.check_idle()?;
        self.arity.check(side)?;
        let avgs: Vec<Point> = self.tables.iter().zip(side).map(|(tb, b)| tb.average(b)).collect();
        let weights: Vec<f64> = self.x_sum.iter().map(|x| x.max(0.0)).collect();
        let total: f64 = weights.iter().sum();
        let m = self.space.dim();
        let mut c = vec![0.0; m];
        if total > 0.0 {
            for (w, avg) in weights.iter().zip(&avgs) {
                for d in 0..m {
                    c[d] += w / total * avg[d];
                }
            }
        } else {
            let n = avgs.len() as f64;
            for avg in &avgs {
                for d in 0..m {
                    c[d] += avg[d] / n;
                }
            }
        }
        self.turn.begin((side.to_vec(), c.clone(), avgs))?;
        Ok(ForecastDecision::deterministic(c))
    }

    fn update(&mut self, a: &[f64]) -> Result<()> {
        check_action(&self.space, a)?;
        let (side, c, avgs) = self.turn.finish()?;
        let own = dist2(a, &c);
        for (n, avg) in avgs.iter().enumerate() {
            self.x_sum[n] += own - dist2(a, avg);
            self.tables[n].observe(side[n].clone(), a)?;
        }
        self.t += 1;
        Ok(())
    }
}

/// Ridge regression by the forward algorithm:
/// `θ_t = (αI + Σ_{s≤t} x_s x_sᵀ)⁻¹ Σ_{s<t} y_s x_s`, with the inverse kept
/// by Sherman–Morrison updates and recomputed when it drifts.
#[derive(Clone, Debug)]
pub struct ForwardRidge {
    dim: usize,
    alpha: f64,
    gram: Vec<f64>,
    inverse: Vec<f64>,
    target: Vec<f64>,
    pending: Option<Vec<f64>>,
    updates: usize,
}

impl ForwardRidge {
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) || dim == 0 {
            return Err(ProcedureError::InvalidParam(format!("ridge needs alpha > 0 and dim > 0, got {alpha}, {dim}")));
        }
        let mut gram = vec![0.0; dim * dim];
        let mut inverse = vec![0.0; dim * dim];
        for i in 0..dim {
            gram[i * dim + i] = alpha;
            inverse[i * dim + i] = 1.0 / alpha;
        }
        Ok(Self { dim, alpha, gram, inverse, target: vec![0.0; dim], pending: None, updates: 0 })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Adds `x xᵀ` to the regularized Gram matrix and returns
    /// `(θ_t, θ_t · x)`.
    pub fn predict(&mut self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        if self.pending.is_some() {
            return Err(ProcedureError::OutOfOrder("predict"));
        }
        let n = self.dim;
        for i in 0..n {
            for j in 0..n {
                self.gram[i * n + j] += x[i] * x[j];
            }
        }
        let ax: Vec<f64> = (0..n).map(|i| (0..n).map(|j| self.inverse[i * n + j] * x[j]).sum()).collect();
        let denom = 1.0 + x.iter().zip(&ax).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            for j in 0..n {
                self.inverse[i * n + j] -= ax[i] * ax[j] / denom;
            }
        }
        self.updates += 1;
        if self.updates.is_multiple_of(64) && self.drift() > 1e-9 {
            self.recompute();
        }
        let theta: Vec<f64> = (0..n).map(|i| (0..n).map(|j| self.inverse[i * n + j] * self.target[j]).sum()).collect();
        let yhat = theta.iter().zip(x).map(|(a, b)| a * b).sum();
        self.pending = Some(x.to_vec());
        Ok((theta, yhat))
    }

    /// Reveals the target of the last `predict`.
    pub fn observe(&mut self, y: f64) -> Result<()> {
        let x = self.pending.take().ok_or(ProcedureError::OutOfOrder("observe"))?;
        for (t, xi) in self.target.iter_mut().zip(&x) {
            *t += y * xi;
        }
        Ok(())
    }

    /// `max |A⁻¹A − I|`.
    pub fn drift(&self) -> f64 {
        let n = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| self.inverse[i * n + k] * self.gram[k * n + j]).sum();
                worst = worst.max((v - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    fn recompute(&mut self) {
        let m = nalgebra::DMatrix::from_row_slice(self.dim, self.dim, &self.gram);
        if let Some(inv) = m.try_inverse() {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    self.inverse[i * self.dim + j] = inv[(i, j)];
                }
            }
        }
    }
}

/// Multi-calibeating by per-coordinate forward ridge regression on the
/// experts' calibeaten forecasts `ā^n_{t−1}(b^n_t)`, centered at the
/// bounding-ball center `c⁰`, followed by projection onto `C`.
#[derive(Clone, Debug)]
pub struct MultiForwardRegression {
    space: Space,
    center: Point,
    tables: Vec<BinTable>,
    ridges: Vec<ForwardRidge>,
    arity: SideArity,
    turn: Turn<Vec<BinKey>>,
}

impl MultiForwardRegression {
    pub fn new(space: &Space, n_experts: usize, alpha: f64) -> Result<Self> {
        if n_experts == 0 {
            return Err(ProcedureError::InvalidParam("need at least one expert".into()));
        }
        let center = space.bounding_ball().center;
        let ridges = (0..space.dim()).map(|_| ForwardRidge::new(n_experts, alpha)).collect::<Result<_>>()?;
        Ok(Self {
            space: space.clone(),
            tables: vec![BinTable::new(space.centroid()); n_experts],
            center,
            ridges,
            arity: SideArity { expected: Some(n_experts) },
            turn: Turn::default(),
        })
    }

    pub fn ridge(&self, coordinate: usize) -> &ForwardRidge {
        &self.ridges[coordinate]
    }
}

impl Forecaster for MultiForwardRegression {
    fn name(&self) -> &'static str {
        "multi_forward_regression"
    }

    fn next(&mut self, side: &[BinKey]) -> Result<ForecastDecision> {
        self.turn.check_idle()?;
        self.arity.check(side)?;
        let avgs: Vec<Point> = self.tables.iter().zip(side).map(|(tb, b)| tb.average(b)).collect();
        let mut chat = self.center.clone();
        for (i, ridge) in self.ridges.iter_mut().enumerate() {
            let x: Vec<f64> = avgs.iter().map(|avg| avg[i] - self.center[i]).collect();
            chat[i] += ridge.predict(&x)?.1;
        }
        let c = self.space.project(&chat)?;
        self.turn.begin(side.to_vec())?;
        Ok(ForecastDecision::deterministic(c))
    }

    fn update(&mut self, a: &[f64]) -> Result<()> {
        check_action(&self.space, a)?;
        let side = self.turn.finish()?;
        for (i, ridge) in self.ridges.iter_mut().enumerate() {
            ridge.observe(a[i] - self.center[i])?;
        }
        for (tb, b) in self.tables.iter_mut().zip(side) {
            tb.observe(b, a)?;
        }
        Ok(())
    }
}

fn require_simplex(space: &Space) -> Result<()> {
    if space.kind() != SpaceKind::Simplex {
        return Err(ProcedureError::InvalidParam("log procedures need a simplex space".into()));
    }
    Ok(())
}

/// `c_t = ā′_{t−1}(b_t)`: regularized side-bin average.
#[derive(Clone, Debug)]
pub struct LogSimpleCalibeat {
    space: Space,
    table: BinTable,
    arity: SideArity,
    turn: Turn<BinKey>,
}

impl LogSimpleCalibeat {
    pub fn new(space: &Space) -> Result<Self> {
        require_simplex(space)?;
        Ok(Self {
            space: space.clone(),
            table: BinTable::regularized(space.centroid()),
            arity: SideArity::default(),
            turn: Turn::default(),
        })
    }
}

impl Forecaster for LogSimpleCalibeat {
    fn name(&self) -> &'static str {
        "log_simple_calibeat"
    }

    fn next(&mut self, side: &[BinKey]) -> Result<ForecastDecision> {
        self.turn.check_idle()?;
        self.arity.check(side)?;
        let key = side_key(side);
        let c = self.table.average(&key);
        self.turn.begin(key)?;
        Ok(ForecastDecision::deterministic(c))
    }

    fn update(&mut self, a: &[f64]) -> Result<()> {
        check_action(&self.space, a)?;
        let key = self.turn.finish()?;
        self.table.observe(key, a)?;
        Ok(())
    }
}

/// Log-calibration: each period solves the log outgoing game for
/// `g(c) = ā′_{t−1}(c)` on a log-grid and samples `c_t ∼ η`.
#[derive(Clone, Debug)]
pub struct LogCalibrated {
    space: Space,
    grid: LogGrid,
    table: BinTable,
    rng: ChaCha8Rng,
    tol: f64,
    turn: Turn<BinKey>,
}

impl LogCalibrated {
    pub fn new(space: &Space, grid: LogGrid, seed: u64) -> Result<Self> {
        require_simplex(space)?;
        if grid.dim() != space.dim() {
            return Err(GeometryError::DimensionMismatch { expected: space.dim(), got: grid.dim() }.into());
        }
        Ok(Self {
            space: space.clone(),
            grid,
            table: BinTable::regularized(space.centroid()),
            rng: ChaCha8Rng::seed_from_u64(seed),
            tol: EXACT_TOL,
            turn: Turn::default(),
        })
    }

    pub fn grid(&self) -> &LogGrid {
        &self.grid
    }
}

impl Forecaster for LogCalibrated {
    fn name(&self) -> &'static str {
        "log_calibrated"
    }

    fn next(&mut self, _side: &[BinKey]) -> Result<ForecastDecision> {
        self.turn.check_idle()?;
        let g: Vec<Point> = (0..self.grid.len()).map(|k| self.table.average(self.grid.key(k))).collect();
        let eta = outgoing_mm_log(&g, &self.grid, self.tol)?;
        let u: f64 = self.rng.gen();
        let (k, point, _) = eta.sample(u).clone();
        let key = self.grid.key(k).clone();
        self.turn.begin(key.clone())?;
        Ok(ForecastDecision { forecast: point, key, distribution: Some(eta), draw: Some(u) })
    }

    fn update(&mut self, a: &[f64]) -> Result<()> {
        check_action(&self.space, a)?;
        let key = self.turn.finish()?;
        self.table.observe(key, a)?;
        Ok(())
    }
}

/// Baseline forecaster that cycles a fixed list of forecasts, ignoring
/// both actions and side forecasts.
#[derive(Clone, Debug)]
pub struct PatternForecaster {
    space: Space,
    pattern: Vec<Point>,
    next: usize,
    turn: Turn<()>,
}

impl PatternForecaster {
    pub fn new(space: &Space, pattern: Vec<Point>) -> Result<Self> {
        if pattern.is_empty() {
            return Err(ProcedureError::InvalidParam("empty forecast pattern".into()));
        }
        if let Some(p) = pattern.iter().find(|p| !space.contains(p)) {
            return Err(ProcedureError::InvalidParam(format!("forecast {p:?} outside the forecast set")));
        }
        Ok(Self { space: space.clone(), pattern, next: 0, turn: Turn::default() })
    }
}

impl Forecaster for PatternForecaster {
    fn name(&self) -> &'static str {
        "pattern"
    }

    fn next(&mut self, _side: &[BinKey]) -> Result<ForecastDecision> {
        self.turn.begin(())?;
        let c = self.pattern[self.next].clone();
        self.next = (self.next + 1) % self.pattern.len();
        Ok(ForecastDecision::deterministic(c))
    }

    fn update(&mut self, a: &[f64]) -> Result<()> {
        check_action(&self.space, a)?;
        self.turn.finish()
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn play(f: &mut dyn Forecaster, stream: &[(bool, usize)]) -> Vec<(f64, Option<f64>)> {
        stream
            .iter()
            .map(|&(a, b)| {
                let d = f.next(&[BinKey::Index(b)]).unwrap();
                f.update(&[if a { 1.0 } else { 0.0 }]).unwrap();
                (d.forecast[0], d.draw)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn same_seed_same_forecasts(
            stream in prop::collection::vec((any::<bool>(), 0usize..3), 1..60),
            seed in any::<u64>(),
        ) {
            let s = Space::cube(1).unwrap();
            let grid = Grid::regular(&s, 6).unwrap();
            let mut a = CalibratedCalibeat::new(&s, grid.clone(), seed).unwrap();
            let mut b = CalibratedCalibeat::new(&s, grid, seed).unwrap();
            prop_assert_eq!(play(&mut a, &stream), play(&mut b, &stream));
            let mut a = SimpleCalibeat::new(&s);
            let mut b = SimpleCalibeat::new(&s);
            prop_assert_eq!(play(&mut a, &stream), play(&mut b, &stream));
        }

        #[test]
        fn forecasts_stay_in_space(stream in prop::collection::vec((any::<bool>(), 0usize..3), 1..60)) {
            let s = Space::cube(1).unwrap();
            let mut c = CenteredCalibeat::new(&s).unwrap();
            let mut r = MultiForwardRegression::new(&s, 1, 0.5).unwrap();
            for (f, _) in play(&mut c, &stream).into_iter().chain(play(&mut r, &stream)) {
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }
    }
}
