//! Experiment configuration, replication, trace/summary output, offline
//! scoring of forecast files and procedure comparisons.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adversaries::{
    ActionSource, AdaptiveWorstCase, BetaBinomialSource, IidSource, PatternSource, SideSource, SourceError, SourceMode,
};
use crate::binning::{joint_key, BinKey, BinTable, BinningError, FractionalBinning};
use crate::geometry::{entropy, GeometryError, Grid, LogGrid, Point, Space, SpaceKind};
use crate::procedures::{
    CalibratedCalibeat, CalibratedForecaster, CenteredCalibeat, ContinuousCalibeat1d, Forecaster, GridSchedule,
    LogCalibrated, LogSimpleCalibeat, MultiBlackwell, MultiForwardRegression, PatternForecaster, ProcedureError,
    SimpleCalibeat,
};
use crate::scores::{online_gap_bound, LogScoreLedger, ScoreError, ScoreLedger};

pub const OUT_DIR_ENV: &str = "CALIBEAT_OUT_DIR";
pub const WORKERS_ENV: &str = "CALIBEAT_WORKERS";

/// Slack allowed on hard (every-period) envelopes for floating-point error.
pub const ARITHMETIC_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    Input { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Procedure(#[from] ProcedureError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Binning(#[from] BinningError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    pub kind: SpaceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<Point>>,
}

impl SpaceSpec {
    pub fn cube(dim: usize) -> Self {
        Self { kind: SpaceKind::Cube, dim: Some(dim), actions: None }
    }

    pub fn simplex(dim: usize) -> Self {
        Self { kind: SpaceKind::Simplex, dim: Some(dim), actions: None }
    }

    pub fn build(&self) -> Result<Space> {
        let need_dim = || self.dim.ok_or_else(|| HarnessError::Config("space needs \"dim\"".into()));
        Ok(match self.kind {
            SpaceKind::Cube => Space::cube(need_dim()?)?,
            SpaceKind::Simplex => Space::simplex(need_dim()?)?,
            SpaceKind::Hull => Space::hull(
                self.actions.clone().ok_or_else(|| HarnessError::Config("hull space needs \"actions\"".into()))?,
            )?,
        })
    }
}

fn default_alpha() -> f64 {
    1.0
}

fn default_resolution() -> u32 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcedureSpec {
    SimpleCalibeat {
        /// Round forecasts to the regular grid of this resolution.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rounding: Option<u32>,
    },
    MultiSimple {},
    CenteredCalibeat {},
    CalibratedForecaster {
        /// Fixed regular grid; `None` uses the doubling schedule.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        resolution: Option<u32>,
    },
    CalibratedCalibeat {
        #[serde(default = "default_resolution")]
        resolution: u32,
    },
    ContinuousCalibeat1d {
        /// Hat functions on `resolution + 1` equally spaced knots.
        #[serde(default = "default_resolution")]
        resolution: u32,
    },
    MultiBlackwell {},
    MultiForwardRegression {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    LogSimpleCalibeat {},
    LogCalibrated {
        #[serde(default = "default_resolution")]
        resolution: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        floor: Option<f64>,
    },
    /// Fixed cyclic forecasts (a baseline, not a calibeating procedure).
    Pattern { forecasts: Vec<Point> },
}

impl ProcedureSpec {
    pub fn label(&self) -> &'static str {
        match self {
            ProcedureSpec::SimpleCalibeat { .. } => "simple_calibeat",
            ProcedureSpec::MultiSimple {} => "multi_simple",
            ProcedureSpec::CenteredCalibeat {} => "centered_calibeat",
            ProcedureSpec::CalibratedForecaster { .. } => "calibrated_forecaster",
            ProcedureSpec::CalibratedCalibeat { .. } => "calibrated_calibeat",
            ProcedureSpec::ContinuousCalibeat1d { .. } => "continuous_calibeat_1d",
            ProcedureSpec::MultiBlackwell {} => "multi_blackwell",
            ProcedureSpec::MultiForwardRegression { .. } => "multi_forward_regression",
            ProcedureSpec::LogSimpleCalibeat {} => "log_simple_calibeat",
            ProcedureSpec::LogCalibrated { .. } => "log_calibrated",
            ProcedureSpec::Pattern { .. } => "pattern",
        }
    }

    fn is_log(&self) -> bool {
        matches!(self, ProcedureSpec::LogSimpleCalibeat {} | ProcedureSpec::LogCalibrated { .. })
    }

    fn needs_side(&self) -> bool {
        !matches!(
            self,
            ProcedureSpec::CalibratedForecaster { .. } | ProcedureSpec::LogCalibrated { .. } | ProcedureSpec::Pattern { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Pattern { pattern: Vec<Point> },
    /// Categorical over the actions of `A` in their canonical order.
    Iid { probs: Vec<f64> },
    Bernoulli { p: f64 },
    BetaBinomial { alpha: f64 },
    Adaptive {},
}

impl SourceSpec {
    pub fn build(&self, space: &Space, seed: u64) -> Result<Box<dyn ActionSource>> {
        Ok(match self {
            SourceSpec::Pattern { pattern } => Box::new(PatternSource::new(space, pattern.clone())?),
            SourceSpec::Iid { probs } => Box::new(IidSource::new(space, probs, seed)?),
            SourceSpec::Bernoulli { p } => {
                if space.kind() != SpaceKind::Cube || space.dim() != 1 {
                    return Err(HarnessError::Config("bernoulli source needs the unit interval".into()));
                }
                Box::new(IidSource::bernoulli(*p, seed)?)
            }
            SourceSpec::BetaBinomial { alpha } => {
                if space.kind() != SpaceKind::Cube || space.dim() != 1 {
                    return Err(HarnessError::Config("beta_binomial source needs the unit interval".into()));
                }
                Box::new(BetaBinomialSource::new(*alpha, seed)?)
            }
            SourceSpec::Adaptive {} => Box::new(AdaptiveWorstCase::new(space)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SideSpec {
    Constant {},
    Cycle { period: usize },
    Pattern { keys: Vec<String> },
    Random { bins: usize },
}

impl SideSpec {
    pub fn build(&self, seed: u64) -> Result<SideSource> {
        Ok(match self {
            SideSpec::Constant {} => SideSource::constant(),
            SideSpec::Cycle { period } => SideSource::cycle(*period)?,
            SideSpec::Pattern { keys } => SideSource::pattern(keys.iter().map(BinKey::label).collect())?,
            SideSpec::Random { bins } => SideSource::random(*bins, seed)?,
        })
    }
}

fn default_reps() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// One experiment. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub space: SpaceSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub procedure: Option<ProcedureSpec>,
    /// Procedures for `compare`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub compare: Vec<ProcedureSpec>,
    pub source: SourceSpec,
    #[serde(default)]
    pub side: Vec<SideSpec>,
    pub t: usize,
    /// Base seed; replication `i` uses `seed + i` unless `seeds` is given.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Emit the per-period trace of the first replication.
    #[serde(default = "default_true")]
    pub trace: bool,
    #[serde(default = "default_true")]
    pub checks: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(HarnessError::Config("t must be positive".into()));
        }
        if self.seeds.as_ref().map_or(self.reps == 0, |s| s.is_empty()) {
            return Err(HarnessError::Config("need at least one replication".into()));
        }
        self.space.build()?;
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.reps as u64).map(|i| self.seed.wrapping_add(i)).collect(),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_procedure(&self, procedure: ProcedureSpec) -> Self {
        Self { procedure: Some(procedure), compare: Vec::new(), ..self.clone() }
    }

    /// Built-in experiments.
    pub fn preset(name: &str) -> Option<Self> {
        let base = |procedure: ProcedureSpec, source: SourceSpec, side: Vec<SideSpec>, t: usize, reps: usize| Self {
            name: name.to_string(),
            space: SpaceSpec::cube(1),
            procedure: Some(procedure),
            compare: Vec::new(),
            source,
            side,
            t,
            seed: 0,
            reps,
            seeds: None,
            trace: true,
            checks: true,
            out: None,
            workers: None,
        };
        let parity = || vec![SideSpec::Cycle { period: 2 }];
        let experts =
            || vec![SideSpec::Cycle { period: 2 }, SideSpec::Constant {}, SideSpec::Cycle { period: 3 }];
        let alternating = || SourceSpec::Pattern { pattern: vec![vec![1.0], vec![0.0]] };
        Some(match name {
            "figure1" => Self {
                procedure: None,
                compare: vec![
                    ProcedureSpec::Pattern { forecasts: vec![vec![1.0], vec![0.0]] },
                    ProcedureSpec::Pattern { forecasts: vec![vec![0.5]] },
                ],
                ..base(ProcedureSpec::MultiSimple {}, alternating(), vec![], 100, 1)
            },
            "simple-bound" => base(ProcedureSpec::SimpleCalibeat { rounding: None }, SourceSpec::Adaptive {}, parity(), 10_000, 1),
            "centered-bound" => base(ProcedureSpec::CenteredCalibeat {}, SourceSpec::Adaptive {}, parity(), 10_000, 1),
            "calibration" => base(
                ProcedureSpec::CalibratedForecaster { resolution: Some(10) },
                SourceSpec::Adaptive {},
                vec![],
                10_000,
                200,
            ),
            "beat-by-calib" => base(
                ProcedureSpec::CalibratedCalibeat { resolution: 10 },
                SourceSpec::Adaptive {},
                parity(),
                10_000,
                200,
            ),
            "lowerbound" => base(
                ProcedureSpec::SimpleCalibeat { rounding: None },
                SourceSpec::BetaBinomial { alpha: 50.0 },
                vec![SideSpec::Constant {}],
                1_000,
                10_000,
            ),
            "blackwell" => base(ProcedureSpec::MultiBlackwell {}, SourceSpec::Adaptive {}, experts(), 10_000, 1),
            "forward-regression" => base(
                ProcedureSpec::MultiForwardRegression { alpha: 1.0 },
                SourceSpec::Adaptive {},
                experts(),
                10_000,
                1,
            ),
            "continuous" => base(
                ProcedureSpec::ContinuousCalibeat1d { resolution: 10 },
                SourceSpec::Adaptive {},
                vec![SideSpec::Constant {}],
                10_000,
                1,
            ),
            "log-calibeat" => Self {
                space: SpaceSpec::simplex(2),
                source: SourceSpec::Pattern { pattern: vec![vec![1.0, 0.0], vec![0.0, 1.0]] },
                ..base(ProcedureSpec::LogSimpleCalibeat {}, alternating(), vec![SideSpec::Constant {}], 10_000, 1)
            },
            "log-calibration" => Self {
                space: SpaceSpec::simplex(2),
                ..base(
                    ProcedureSpec::LogCalibrated { resolution: 10, floor: None },
                    SourceSpec::Adaptive {},
                    vec![],
                    10_000,
                    100,
                )
            },
            _ => return None,
        })
    }

    pub const PRESETS: &'static [&'static str] = &[
        "figure1",
        "simple-bound",
        "centered-bound",
        "calibration",
        "beat-by-calib",
        "lowerbound",
        "blackwell",
        "forward-regression",
        "continuous",
        "log-calibeat",
        "log-calibration",
    ];
}

/// Independent sub-seed `k` of a replication seed (SplitMix64 finalizer).
pub fn substream(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Output directory: explicit flag, then `CALIBEAT_OUT_DIR`, then the
/// config value, then `out`.
pub fn output_dir(flag: Option<&Path>, config: Option<&str>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(p) = std::env::var(OUT_DIR_ENV) {
        if !p.is_empty() {
            return PathBuf::from(p);
        }
    }
    PathBuf::from(config.unwrap_or("out"))
}

/// Worker count: `CALIBEAT_WORKERS`, then the config value; `None` lets the
/// pool decide.
pub fn worker_count(config: Option<usize>) -> Option<usize> {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n: &usize| n > 0).or(config)
}

/// Runs `f` over the seeds, in parallel when enabled, with results in seed
/// order.
pub fn map_seeds<T, F>(seeds: &[u64], workers: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if seeds.len() > 1 && workers != Some(1) {
            let mut builder = rayon::ThreadPoolBuilder::new();
            if let Some(n) = workers {
                builder = builder.num_threads(n);
            }
            if let Ok(pool) = builder.build() {
                return pool.install(|| seeds.par_iter().enumerate().map(|(i, &s)| f(i, s)).collect());
            }
        }
    }
    let _ = workers;
    seeds.iter().enumerate().map(|(i, &s)| f(i, s)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    /// Hard envelope asserted at every period of every replication.
    EveryT,
    /// Mean over replications of the final value against the mean bound
    /// plus three standard errors.
    Mean,
    /// Reported only; `fitted_constant` is the mean of `gap · t / ln t`.
    Report,
}

#[derive(Clone, Debug)]
struct CheckDef {
    name: String,
    formula: String,
    constants: BTreeMap<String, f64>,
    mode: CheckMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CheckTally {
    pub final_gap: f64,
    pub final_bound: f64,
    /// `max_t (gap_t − bound_t)`.
    pub worst_margin: f64,
    pub first_violation: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub name: String,
    pub formula: String,
    pub constants: BTreeMap<String, f64>,
    pub mode: CheckMode,
    pub observed: f64,
    pub bound: f64,
    pub stderr: Option<f64>,
    pub worst_margin: Option<f64>,
    pub fitted_constant: Option<f64>,
    /// `(seed, t)` of the first violation of a hard envelope.
    pub first_violation: Option<(u64, usize)>,
    pub pass: Option<bool>,
}

/// Per-period row of the trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub a: Point,
    pub b: Vec<String>,
    pub c: Point,
    pub sq_err: f64,
    pub brier: f64,
    pub k_l2: f64,
    pub k_l1: f64,
    pub r: f64,
    pub r_tilde: f64,
    pub bound: f64,
    pub extra: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trace {
    pub m: usize,
    pub n_side: usize,
    pub extra_columns: Vec<String>,
    pub rows: Vec<TraceRow>,
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

impl Trace {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((1..=self.m).map(|i| format!("a_{i}")));
        h.extend((1..=self.n_side).map(|i| format!("b_{i}")));
        h.extend((1..=self.m).map(|i| format!("c_{i}")));
        for k in ["sq_err", "B", "K_l2", "K_l1", "R", "R_tilde", "bound"] {
            h.push(k.to_string());
        }
        h.extend(self.extra_columns.iter().cloned());
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for row in &self.rows {
            let mut rec = vec![row.t.to_string()];
            rec.extend(row.a.iter().map(|&v| fmt_f64(v)));
            rec.extend(row.b.iter().cloned());
            rec.extend(row.c.iter().map(|&v| fmt_f64(v)));
            for v in [row.sq_err, row.brier, row.k_l2, row.k_l1, row.r, row.r_tilde, row.bound] {
                rec.push(fmt_f64(v));
            }
            rec.extend(row.extra.iter().map(|&v| fmt_f64(v)));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }

    /// Hex SHA-256 of the CSV form.
    pub fn hash(&self) -> Result<String> {
        let csv = self.to_csv_string()?;
        Ok(Sha256::digest(csv.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Replication {
    pub seed: u64,
    pub scores: BTreeMap<String, f64>,
    pub checks: Vec<CheckTally>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalScores {
    pub per_replication: Vec<BTreeMap<String, f64>>,
    pub mean: BTreeMap<String, f64>,
    pub stderr: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub procedure: String,
    pub t: usize,
    /// `ā₀` used for empty bins.
    pub prior: Point,
    pub final_scores: FinalScores,
    pub bounds: Vec<BoundReport>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl Summary {
    pub fn all_pass(&self) -> bool {
        self.bounds.iter().all(|b| b.pass != Some(false))
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: Summary,
    pub trace: Option<Trace>,
    pub replications: Vec<Replication>,
}

/// Running tallies of one side binning.
#[derive(Clone, Debug)]
struct SideTally {
    table: BinTable,
    m2: f64,
    weighted_entropy: f64,
    log: bool,
}

impl SideTally {
    fn new(prior: Point, log: bool) -> Self {
        Self { table: BinTable::new(prior), m2: 0.0, weighted_entropy: 0.0, log }
    }

    fn terms(&self, key: &BinKey) -> (f64, f64) {
        match self.table.stats(key) {
            Some(s) => (s.m2, if self.log { s.weight * entropy(&s.mean) } else { 0.0 }),
            None => (0.0, 0.0),
        }
    }

    fn observe(&mut self, key: BinKey, a: &[f64]) -> Result<()> {
        let (m2, h) = self.terms(&key);
        self.table.observe(key.clone(), a)?;
        let (m2n, hn) = self.terms(&key);
        self.m2 += m2n - m2;
        self.weighted_entropy += hn - h;
        Ok(())
    }

    fn refinement(&self, t: f64) -> f64 {
        self.m2.max(0.0) / t
    }

    fn log_refinement(&self, t: f64, mean_entropy: f64) -> f64 {
        self.weighted_entropy / t - mean_entropy
    }

    fn bins(&self) -> usize {
        self.table.len()
    }
}

enum Built {
    Simple(SimpleCalibeat),
    Centered(CenteredCalibeat),
    Calibrated(CalibratedForecaster),
    Continuous(ContinuousCalibeat1d),
    Blackwell(MultiBlackwell),
    Forward(MultiForwardRegression),
    LogSimple(LogSimpleCalibeat),
    LogCalibrated(LogCalibrated),
    Pattern(PatternForecaster),
}

impl Built {
    fn forecaster(&mut self) -> &mut dyn Forecaster {
        match self {
            Built::Simple(f) => f,
            Built::Centered(f) => f,
            Built::Calibrated(f) => f,
            Built::Continuous(f) => f,
            Built::Blackwell(f) => f,
            Built::Forward(f) => f,
            Built::LogSimple(f) => f,
            Built::LogCalibrated(f) => f,
            Built::Pattern(f) => f,
        }
    }
}

/// Constants that enter the envelopes.
#[derive(Clone, Debug, Default)]
struct Constants {
    gamma: f64,
    r: f64,
    m: f64,
    grid_len: Option<f64>,
    delta: Option<f64>,
    rounding_delta: Option<f64>,
    alpha: Option<f64>,
}

fn build_procedure(spec: &ProcedureSpec, space: &Space, n_side: usize, seed: u64) -> Result<(Built, Constants)> {
    let mut k = Constants {
        gamma: space.diameter(),
        r: space.bounding_ball().radius,
        m: space.dim() as f64,
        ..Constants::default()
    };
    if spec.needs_side() && n_side == 0 {
        return Err(HarnessError::Config(format!("{} needs at least one side forecast", spec.label())));
    }
    let built = match spec {
        ProcedureSpec::SimpleCalibeat { rounding } => {
            let mut f = SimpleCalibeat::new(space);
            if let Some(res) = rounding {
                let grid = Grid::regular(space, *res)?;
                k.rounding_delta = Some(grid.delta());
                f = f.with_rounding(grid);
            }
            Built::Simple(f)
        }
        ProcedureSpec::MultiSimple {} => Built::Simple(SimpleCalibeat::multi(space)),
        ProcedureSpec::CenteredCalibeat {} => {
            k.r = space.min_bounding_radius()?.radius;
            Built::Centered(CenteredCalibeat::new(space)?)
        }
        ProcedureSpec::CalibratedForecaster { resolution: Some(res) } => {
            let grid = Grid::regular(space, *res)?;
            k.grid_len = Some(grid.len() as f64);
            k.delta = Some(grid.delta());
            Built::Calibrated(CalibratedForecaster::new(space, grid, seed)?)
        }
        ProcedureSpec::CalibratedForecaster { resolution: None } => {
            Built::Calibrated(CalibratedForecaster::scheduled(space, GridSchedule::Doubling, seed)?)
        }
        ProcedureSpec::CalibratedCalibeat { resolution } => {
            let grid = Grid::regular(space, *resolution)?;
            k.grid_len = Some(grid.len() as f64);
            k.delta = Some(grid.delta());
            Built::Calibrated(CalibratedCalibeat::new(space, grid, seed)?)
        }
        ProcedureSpec::ContinuousCalibeat1d { resolution } => {
            Built::Continuous(ContinuousCalibeat1d::new(space, FractionalBinning::uniform_hats(*resolution)?)?)
        }
        ProcedureSpec::MultiBlackwell {} => Built::Blackwell(MultiBlackwell::new(space, n_side)?),
        ProcedureSpec::MultiForwardRegression { alpha } => {
            k.alpha = Some(*alpha);
            Built::Forward(MultiForwardRegression::new(space, n_side, *alpha)?)
        }
        ProcedureSpec::LogSimpleCalibeat {} => Built::LogSimple(LogSimpleCalibeat::new(space)?),
        ProcedureSpec::LogCalibrated { resolution, floor } => {
            let floor = floor.unwrap_or(0.01);
            let grid = LogGrid::new(space.dim(), *resolution, floor)?;
            k.grid_len = Some(grid.len() as f64);
            k.delta = Some(grid.delta());
            Built::LogCalibrated(LogCalibrated::new(space, grid, seed)?)
        }
        ProcedureSpec::Pattern { forecasts } => Built::Pattern(PatternForecaster::new(space, forecasts.clone())?),
    };
    Ok((built, k))
}

fn consts(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn check_defs(spec: &ProcedureSpec, k: &Constants, n_side: usize) -> Vec<CheckDef> {
    let def = |name: String, formula: &str, constants: BTreeMap<String, f64>, mode| CheckDef {
        name,
        formula: formula.to_string(),
        constants,
        mode,
    };
    let per_side = |formula: &str, constants: BTreeMap<String, f64>, mode| -> Vec<CheckDef> {
        (1..=n_side).map(|n| def(format!("beat_b{n}"), formula, constants.clone(), mode)).collect()
    };
    match spec {
        ProcedureSpec::SimpleCalibeat { rounding: None } | ProcedureSpec::MultiSimple {} => per_side(
            "B - R^b_n <= gamma^2 * |B| * (ln t + 1) / t, |B| = realized joint bins",
            consts(&[("gamma", k.gamma)]),
            CheckMode::EveryT,
        ),
        ProcedureSpec::SimpleCalibeat { rounding: Some(_) } => per_side(
            "B - R^b_n <= gamma^2 * |B| * (ln t + 1) / t + 2 * gamma * delta",
            consts(&[("gamma", k.gamma), ("delta", k.rounding_delta.unwrap_or(0.0))]),
            CheckMode::EveryT,
        ),
        ProcedureSpec::CenteredCalibeat {} => per_side(
            "B - R^b_n <= r^2 * |B| * (ln t + 1) / t, |B| = realized joint bins",
            consts(&[("r", k.r)]),
            CheckMode::EveryT,
        ),
        ProcedureSpec::CalibratedForecaster { resolution: Some(_) } => vec![def(
            "calibration".into(),
            "E[K_l2] <= delta^2 + gamma^2 * |D| * (ln t + 1) / t",
            consts(&[("gamma", k.gamma), ("delta", k.delta.unwrap_or(0.0)), ("D", k.grid_len.unwrap_or(0.0))]),
            CheckMode::Mean,
        )],
        ProcedureSpec::CalibratedForecaster { resolution: None } => vec![def(
            "calibration_schedule".into(),
            "K_l2 at the current grid: delta_t^2 + gamma^2 * |D_t| * (ln t + 1) / t (heuristic)",
            consts(&[("gamma", k.gamma)]),
            CheckMode::Report,
        )],
        ProcedureSpec::CalibratedCalibeat { .. } => {
            let c = consts(&[("gamma", k.gamma), ("delta", k.delta.unwrap_or(0.0)), ("D", k.grid_len.unwrap_or(0.0))]);
            vec![
                def(
                    "beat_joint".into(),
                    "E[B - R^b] <= delta^2 + gamma^2 * |B| * |D| * (ln t + 1) / t",
                    c.clone(),
                    CheckMode::Mean,
                ),
                def("calibration".into(), "E[K_l2] <= delta^2 + gamma^2 * |B| * |D| * (ln t + 1) / t", c, CheckMode::Mean),
            ]
        }
        ProcedureSpec::ContinuousCalibeat1d { .. } => vec![def(
            "continuous_beat".into(),
            "B - R^{b,Pi} <= (R_tilde^{b,Pi} - R^{b,Pi}) + accumulated_slack / t",
            consts(&[("gamma", k.gamma)]),
            CheckMode::EveryT,
        )],
        ProcedureSpec::MultiBlackwell {} => {
            let mut v = per_side(
                "B - R^b_n <= gamma^2 * sqrt(N) / sqrt(t) + gamma^2 * |B^n| * (ln t + 1) / t",
                consts(&[("gamma", k.gamma), ("N", n_side as f64)]),
                CheckMode::EveryT,
            );
            v.push(def(
                "orthant_distance".into(),
                "dist^2(xbar_t, R^N_-) <= gamma^4 * N / t",
                consts(&[("gamma", k.gamma), ("N", n_side as f64)]),
                CheckMode::EveryT,
            ));
            v
        }
        ProcedureSpec::MultiForwardRegression { .. } => per_side(
            "B - R^b_n <= (m * gamma0 * N / t) * ln(gamma0 * t / alpha + 1) + m * alpha / t + gamma^2 * |B^n| * (ln t + 1) / t",
            consts(&[
                ("gamma", k.gamma),
                ("gamma0", k.r),
                ("m", k.m),
                ("N", n_side as f64),
                ("alpha", k.alpha.unwrap_or(1.0)),
            ]),
            CheckMode::EveryT,
        ),
        ProcedureSpec::LogSimpleCalibeat {} => vec![def(
            "log_beat".into(),
            "L - R^{L,b} = O(ln t / t); fitted constant (L - R^{L,b}) * t / ln t",
            BTreeMap::new(),
            CheckMode::Report,
        )],
        ProcedureSpec::LogCalibrated { .. } => vec![def(
            "log_calibration".into(),
            "E[K^L] <= delta + E[R_tilde^L - R^L]",
            consts(&[("delta", k.delta.unwrap_or(0.0)), ("D", k.grid_len.unwrap_or(0.0))]),
            CheckMode::Mean,
        )],
        ProcedureSpec::Pattern { .. } => Vec::new(),
    }
}

fn ln_term(t: f64) -> f64 {
    (t.ln() + 1.0) / t
}

/// Everything observable after one period, for envelope evaluation.
struct StepView<'a> {
    t: f64,
    brier: f64,
    k_l2: f64,
    r_side: &'a [f64],
    bins_side: &'a [usize],
    joint_r: f64,
    joint_bins: usize,
    extra: &'a BTreeMap<&'static str, f64>,
}

fn evaluate(spec: &ProcedureSpec, k: &Constants, v: &StepView) -> Vec<(f64, f64)> {
    let t = v.t;
    let per_side = |bound: &dyn Fn(usize) -> f64| -> Vec<(f64, f64)> {
        v.r_side.iter().enumerate().map(|(n, r)| (v.brier - r, bound(n))).collect()
    };
    let g2 = k.gamma * k.gamma;
    match spec {
        ProcedureSpec::SimpleCalibeat { .. } | ProcedureSpec::MultiSimple {} => {
            let extra = k.rounding_delta.map_or(0.0, |d| 2.0 * k.gamma * d);
            per_side(&|_| g2 * v.joint_bins as f64 * ln_term(t) + extra)
        }
        ProcedureSpec::CenteredCalibeat {} => per_side(&|_| k.r * k.r * v.joint_bins as f64 * ln_term(t)),
        ProcedureSpec::CalibratedForecaster { resolution: Some(_) } => {
            let (d, n) = (k.delta.unwrap_or(0.0), k.grid_len.unwrap_or(0.0));
            vec![(v.k_l2, d * d + g2 * n * ln_term(t))]
        }
        ProcedureSpec::CalibratedForecaster { resolution: None } => {
            let (d, n) = (v.extra["grid_delta"], v.extra["grid_len"]);
            vec![(v.k_l2, d * d + g2 * n * ln_term(t))]
        }
        ProcedureSpec::CalibratedCalibeat { .. } => {
            let (d, n) = (k.delta.unwrap_or(0.0), k.grid_len.unwrap_or(0.0));
            let bound = d * d + g2 * v.joint_bins as f64 * n * ln_term(t);
            vec![(v.brier - v.joint_r, bound), (v.k_l2, bound)]
        }
        ProcedureSpec::ContinuousCalibeat1d { .. } => {
            let (r, rt, slack) = (v.extra["R_joint"], v.extra["R_tilde_joint"], v.extra["slack"]);
            vec![(v.brier - r, (rt - r) + slack / t)]
        }
        ProcedureSpec::MultiBlackwell {} => {
            let n = v.r_side.len() as f64;
            let mut out = per_side(&|i| g2 * n.sqrt() / t.sqrt() + g2 * v.bins_side[i] as f64 * ln_term(t));
            out.push((v.extra["dist2"], g2 * g2 * n / t));
            out
        }
        ProcedureSpec::MultiForwardRegression { alpha } => {
            let n = v.r_side.len() as f64;
            let g0 = k.r;
            let base = (k.m * g0 * n / t) * (g0 * t / alpha + 1.0).ln() + k.m * alpha / t;
            per_side(&|i| base + g2 * v.bins_side[i] as f64 * ln_term(t))
        }
        ProcedureSpec::LogSimpleCalibeat {} => vec![(v.extra["L"] - v.extra["R_log_b1"], f64::NAN)],
        ProcedureSpec::LogCalibrated { .. } => {
            let d = k.delta.unwrap_or(0.0);
            vec![(v.extra["K_log"], d + v.extra["R_tilde_log"] - v.extra["R_log"])]
        }
        ProcedureSpec::Pattern { .. } => Vec::new(),
    }
}

/// Runs one replication. Returns the final tallies and, if requested, the
/// full trace.
pub fn run_replication(
    config: &ExperimentConfig,
    spec: &ProcedureSpec,
    seed: u64,
    want_trace: bool,
) -> Result<(Replication, Option<Trace>)> {
    let space = config.space.build()?;
    let n_side = config.side.len();
    let (mut built, k) = build_procedure(spec, &space, n_side, substream(seed, 0))?;
    let defs = check_defs(spec, &k, n_side);
    let mut source = config.source.build(&space, substream(seed, 1))?;
    let mut sides: Vec<SideSource> =
        config.side.iter().enumerate().map(|(i, s)| s.build(substream(seed, 2 + i as u64))).collect::<Result<_>>()?;
    let log = spec.is_log();
    let prior = space.centroid();
    let mut ledger = ScoreLedger::new(prior.clone());
    let mut log_ledger = if log { Some(LogScoreLedger::new(space.dim())) } else { None };
    let mut side_tallies: Vec<SideTally> = (0..n_side).map(|_| SideTally::new(prior.clone(), log)).collect();
    let mut joint = SideTally::new(prior.clone(), false);
    let mut tallies: Vec<CheckTally> = defs
        .iter()
        .map(|_| CheckTally {
            final_gap: f64::NAN,
            final_bound: f64::NAN,
            worst_margin: f64::NEG_INFINITY,
            first_violation: None,
        })
        .collect();
    let mut rows = Vec::new();
    let mut extra: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut entropy_sum = 0.0;
    let mut r_side = vec![0.0; n_side];
    let mut bins_side = vec![0usize; n_side];
    let mut side_keys = Vec::with_capacity(n_side);

    for step in 1..=config.t {
        side_keys.clear();
        side_keys.extend(sides.iter_mut().map(|s| s.next_key(step)));
        let decision = built.forecaster().next(&side_keys)?;
        let a = match source.mode() {
            SourceMode::Adaptive => source.next_action(Some(&decision.visible()))?,
            SourceMode::Oblivious => source.next_action(None)?,
        };
        let c = decision.forecast;
        built.forecaster().update(&a)?;
        let delta = ledger.record(&a, &c, decision.key.clone())?;
        if let Some(l) = log_ledger.as_mut() {
            l.record(&a, &c, decision.key)?;
            entropy_sum += entropy(&a);
        }
        for (tally, key) in side_tallies.iter_mut().zip(&side_keys) {
            tally.observe(key.clone(), &a)?;
        }
        if n_side > 0 {
            joint.observe(joint_key(&side_keys), &a)?;
        }

        let t = step as f64;
        let s = ledger.running()?;
        for n in 0..n_side {
            r_side[n] = side_tallies[n].refinement(t);
            bins_side[n] = side_tallies[n].bins();
        }
        extra.clear();
        match &built {
            Built::Continuous(f) => {
                let fs = f.ledger().scores()?;
                extra.insert("K_joint", fs.k_joint);
                extra.insert("R_joint", fs.r_joint);
                extra.insert("R_tilde_joint", fs.online_r_joint);
                extra.insert("slack", f.accumulated_slack());
            }
            Built::Blackwell(f) => {
                extra.insert("dist2", f.dist2_to_orthant());
            }
            Built::Calibrated(f) => {
                extra.insert("grid_len", f.grid().len() as f64);
                extra.insert("grid_delta", f.grid().delta());
            }
            _ => {}
        }
        if let Some(l) = &log_ledger {
            let ls = l.running()?;
            extra.insert("L", ls.log_score);
            extra.insert("R_log", ls.refinement);
            extra.insert("K_log", ls.calibration);
            extra.insert("R_tilde_log", ls.online_refinement);
            if let Some(side) = side_tallies.first() {
                extra.insert("R_log_b1", side.log_refinement(t, entropy_sum / t));
            }
        }
        let view = StepView {
            t,
            brier: s.brier,
            k_l2: s.calibration_l2,
            r_side: &r_side,
            bins_side: &bins_side,
            joint_r: joint.refinement(t),
            joint_bins: joint.bins(),
            extra: &extra,
        };
        let evals = if config.checks { evaluate(spec, &k, &view) } else { Vec::new() };
        for ((tally, def), &(gap, bound)) in tallies.iter_mut().zip(&defs).zip(&evals) {
            tally.final_gap = gap;
            tally.final_bound = bound;
            if def.mode == CheckMode::EveryT {
                let margin = gap - bound;
                tally.worst_margin = tally.worst_margin.max(margin);
                if margin > ARITHMETIC_SLACK && tally.first_violation.is_none() {
                    tally.first_violation = Some(step);
                }
            }
        }
        if want_trace {
            let mut extra_vals: Vec<f64> = Vec::new();
            extra_vals.push(evals.first().map_or(f64::NAN, |e| e.0));
            extra_vals.extend(r_side.iter().copied());
            extra_vals.extend(extra.values().copied());
            rows.push(TraceRow {
                t: step,
                a: a.clone(),
                b: side_keys.iter().map(|k| k.to_string()).collect(),
                c: c.clone(),
                sq_err: delta.sq_err,
                brier: s.brier,
                k_l2: s.calibration_l2,
                k_l1: s.calibration_l1,
                r: s.refinement,
                r_tilde: s.online_refinement,
                bound: evals.first().map_or(f64::NAN, |e| e.1),
                extra: extra_vals,
            });
        }
    }

    let t = config.t as f64;
    let fin = ledger.scores()?;
    let mut scores = BTreeMap::new();
    scores.insert("B".to_string(), fin.brier);
    scores.insert("K_l2".to_string(), fin.calibration_l2);
    scores.insert("K_l1".to_string(), fin.calibration_l1);
    scores.insert("R".to_string(), fin.refinement);
    scores.insert("R_tilde".to_string(), fin.online_refinement);
    scores.insert("bins".to_string(), ledger.n_distinct() as f64);
    for (n, tally) in side_tallies.iter().enumerate() {
        let r = tally.table.refinement();
        scores.insert(format!("R_b{}", n + 1), r);
        scores.insert(format!("B_minus_R_b{}", n + 1), fin.brier - r);
        scores.insert(format!("bins_b{}", n + 1), tally.bins() as f64);
    }
    if n_side > 1 {
        scores.insert("R_joint_b".to_string(), joint.table.refinement());
    }
    if let Some(l) = &log_ledger {
        let ls = l.scores()?;
        scores.insert("L".to_string(), ls.log_score);
        scores.insert("R_log".to_string(), ls.refinement);
        scores.insert("K_log".to_string(), ls.calibration);
        scores.insert("R_tilde_log".to_string(), ls.online_refinement);
        if let Some(side) = side_tallies.first() {
            scores.insert("R_log_b1".to_string(), side.log_refinement(t, entropy_sum / t));
        }
    }
    for (name, v) in &extra {
        if !scores.contains_key(*name) {
            scores.insert(name.to_string(), *v);
        }
    }
    for (def, tally) in defs.iter().zip(&tallies) {
        scores.insert(format!("gap_{}", def.name), tally.final_gap);
        scores.insert(format!("bound_{}", def.name), tally.final_bound);
    }

    let trace = want_trace.then(|| {
        let mut extra_columns = vec!["gap".to_string()];
        extra_columns.extend((1..=n_side).map(|n| format!("R_b_{n}")));
        extra_columns.extend(extra.keys().map(|k| k.to_string()));
        Trace { m: space.dim(), n_side, extra_columns, rows }
    });
    Ok((Replication { seed, scores, checks: tallies }, trace))
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn aggregate(reps: &[Replication]) -> FinalScores {
    let mut mean = BTreeMap::new();
    let mut stderr = BTreeMap::new();
    if let Some(first) = reps.first() {
        for key in first.scores.keys() {
            let vals: Vec<f64> = reps.iter().filter_map(|r| r.scores.get(key).copied()).collect();
            let (m, s) = mean_stderr(&vals);
            mean.insert(key.clone(), m);
            stderr.insert(key.clone(), s);
        }
    }
    FinalScores { per_replication: reps.iter().map(|r| r.scores.clone()).collect(), mean, stderr }
}

fn reports(defs: &[CheckDef], reps: &[Replication], t: usize) -> Vec<BoundReport> {
    defs.iter()
        .enumerate()
        .map(|(i, def)| {
            let gaps: Vec<f64> = reps.iter().map(|r| r.checks[i].final_gap).collect();
            let bounds: Vec<f64> = reps.iter().map(|r| r.checks[i].final_bound).collect();
            let (gap_mean, gap_se) = mean_stderr(&gaps);
            let (bound_mean, _) = mean_stderr(&bounds);
            let mut report = BoundReport {
                name: def.name.clone(),
                formula: def.formula.clone(),
                constants: def.constants.clone(),
                mode: def.mode,
                observed: gap_mean,
                bound: bound_mean,
                stderr: Some(gap_se),
                worst_margin: None,
                fitted_constant: None,
                first_violation: None,
                pass: None,
            };
            match def.mode {
                CheckMode::EveryT => {
                    let worst = reps.iter().map(|r| r.checks[i].worst_margin).fold(f64::NEG_INFINITY, f64::max);
                    report.worst_margin = Some(worst);
                    report.first_violation =
                        reps.iter().find_map(|r| r.checks[i].first_violation.map(|t| (r.seed, t)));
                    report.pass = Some(report.first_violation.is_none());
                }
                CheckMode::Mean => {
                    report.pass = Some(gap_mean <= bound_mean + 3.0 * gap_se);
                }
                CheckMode::Report => {
                    let tf = t as f64;
                    if tf > 1.0 {
                        report.fitted_constant = Some(gap_mean * tf / tf.ln());
                    }
                }
            }
            report
        })
        .collect()
}

/// Runs all replications of `config.procedure`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let spec = config
        .procedure
        .clone()
        .ok_or_else(|| HarnessError::Config("config has no \"procedure\"".into()))?;
    run_spec(config, &spec)
}

fn run_spec(config: &ExperimentConfig, spec: &ProcedureSpec) -> Result<RunOutput> {
    let space = config.space.build()?;
    let seeds = config.seed_list();
    let results = map_seeds(&seeds, worker_count(config.workers), |i, seed| {
        run_replication(config, spec, seed, config.trace && i == 0)
    })?;
    let mut trace = None;
    let mut replications = Vec::with_capacity(results.len());
    for (rep, tr) in results {
        if trace.is_none() {
            trace = tr;
        }
        replications.push(rep);
    }
    let (_, k) = build_procedure(spec, &space, config.side.len(), 0)?;
    let defs = if config.checks { check_defs(spec, &k, config.side.len()) } else { Vec::new() };
    let summary = Summary {
        name: config.name.clone(),
        procedure: spec.label().to_string(),
        t: config.t,
        prior: space.centroid(),
        final_scores: aggregate(&replications),
        bounds: reports(&defs, &replications, config.t),
        seeds,
        config_hash: config.with_procedure(spec.clone()).hash(),
    };
    Ok(RunOutput { summary, trace, replications })
}

/// Writes `<stem>_trace.csv` (if any) and `<stem>_summary.json` into `dir`.
pub fn write_run(dir: &Path, stem: &str, output: &RunOutput) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if let Some(trace) = &output.trace {
        let path = dir.join(format!("{stem}_trace.csv"));
        trace.write_csv(std::fs::File::create(&path)?)?;
        written.push(path);
    }
    let path = dir.join(format!("{stem}_summary.json"));
    let mut f = std::fs::File::create(&path)?;
    serde_json::to_writer_pretty(&mut f, &output.summary)?;
    f.write_all(b"\n")?;
    written.push(path);
    Ok(written)
}

/// One row of a procedure comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub rank: usize,
    pub procedure: String,
    #[serde(rename = "B")]
    pub brier: f64,
    #[serde(rename = "R")]
    pub refinement: f64,
    #[serde(rename = "K_l2")]
    pub k_l2: f64,
    #[serde(rename = "K_l1")]
    pub k_l1: f64,
    /// `B − R^{b_n}` per side forecast.
    pub beat: Vec<f64>,
    pub bound: f64,
    pub pass: Option<bool>,
    pub trace_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl CompareReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n_side = self.rows.first().map_or(0, |r| r.beat.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> =
            ["rank", "procedure", "B", "R", "K_l2", "K_l1"].iter().map(|s| s.to_string()).collect();
        header.extend((1..=n_side).map(|n| format!("B_minus_R_b_{n}")));
        header.extend(["bound", "pass", "trace_hash"].iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.rank.to_string(), r.procedure.clone()];
            rec.extend([r.brier, r.refinement, r.k_l2, r.k_l1].iter().map(|&v| fmt_f64(v)));
            rec.extend(r.beat.iter().map(|&v| fmt_f64(v)));
            rec.push(fmt_f64(r.bound));
            rec.push(r.pass.map_or(String::new(), |p| if p { "PASS".into() } else { "FAIL".into() }));
            rec.push(r.trace_hash.clone().unwrap_or_default());
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every procedure of `config.compare` (or `config.procedure`) on the
/// same seeds and ranks them by mean Brier score.
pub fn compare(config: &ExperimentConfig) -> Result<(CompareReport, Vec<RunOutput>)> {
    config.validate()?;
    let specs: Vec<ProcedureSpec> = if config.compare.is_empty() {
        config.procedure.clone().into_iter().collect()
    } else {
        config.compare.clone()
    };
    if specs.is_empty() {
        return Err(HarnessError::Config("nothing to compare".into()));
    }
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    for spec in &specs {
        let out = run_spec(config, spec)?;
        let mean = &out.summary.final_scores.mean;
        let get = |k: &str| mean.get(k).copied().unwrap_or(f64::NAN);
        let first = out.summary.bounds.first();
        rows.push(CompareRow {
            rank: 0,
            procedure: spec.label().to_string(),
            brier: get("B"),
            refinement: get("R"),
            k_l2: get("K_l2"),
            k_l1: get("K_l1"),
            beat: (1..=config.side.len()).map(|n| get(&format!("B_minus_R_b{n}"))).collect(),
            bound: first.map_or(f64::NAN, |b| b.bound),
            pass: if out.summary.bounds.is_empty() { None } else { Some(out.summary.all_pass()) },
            trace_hash: out.trace.as_ref().map(|t| t.hash()).transpose()?,
        });
        outputs.push(out);
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&i, &j| rows[i].brier.total_cmp(&rows[j].brier).then(i.cmp(&j)));
    let mut ranked: Vec<CompareRow> = order.iter().map(|&i| rows[i].clone()).collect();
    for (r, row) in ranked.iter_mut().enumerate() {
        row.rank = r + 1;
    }
    Ok((CompareReport { rows: ranked, seeds: config.seed_list(), config_hash: config.hash() }, outputs))
}

/// Scores of one side column of a forecast file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SideScore {
    pub column: String,
    pub bins: usize,
    #[serde(rename = "R_b")]
    pub refinement: f64,
    #[serde(rename = "B_minus_R_b")]
    pub beat: f64,
}

/// Offline scores of a forecast file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileScores {
    pub t: usize,
    pub m: usize,
    #[serde(rename = "B")]
    pub brier: f64,
    #[serde(rename = "K_l2")]
    pub k_l2: f64,
    #[serde(rename = "K_l1")]
    pub k_l1: f64,
    #[serde(rename = "R")]
    pub refinement: f64,
    #[serde(rename = "R_tilde")]
    pub online_refinement: f64,
    /// `B − R − K_l2`.
    pub residual: f64,
    pub bins: usize,
    /// `γ² (N/t)(ln(t/N) + 1)`.
    pub online_gap_bound: f64,
    pub side: Vec<SideScore>,
}

fn parse_header(header: &csv::StringRecord) -> Result<(usize, Vec<String>)> {
    let bad = |message: String| HarnessError::Input { line: 1, message };
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.first() != Some(&"t") {
        return Err(bad("first column must be \"t\"".into()));
    }
    let m = cols.iter().skip(1).take_while(|c| c.starts_with("a_")).count();
    if m == 0 {
        return Err(bad("no action columns a_1..a_m".into()));
    }
    for i in 1..=m {
        if cols[i] != format!("a_{i}") {
            return Err(bad(format!("expected a_{i}, found {}", cols[i])));
        }
        match cols.get(m + i) {
            Some(c) if *c == format!("c_{i}") => {}
            other => return Err(bad(format!("expected c_{i}, found {}", other.unwrap_or(&"end of header")))),
        }
    }
    let rest: Vec<String> = cols[1 + 2 * m..].iter().map(|s| s.to_string()).collect();
    for (n, c) in rest.iter().enumerate() {
        if *c != format!("b_{}", n + 1) {
            return Err(bad(format!("expected b_{}, found {c}", n + 1)));
        }
    }
    Ok((m, rest))
}

/// Scores a CSV stream `t,a_1..a_m,c_1..c_m[,b_1..b_N]`. Forecasts are
/// binned by exact value; `space` defaults to `[0,1]^m`.
pub fn score_reader<R: Read>(input: R, space: Option<&Space>) -> Result<FileScores> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let (m, side_cols) = parse_header(reader.headers()?)?;
    let default_space;
    let space = match space {
        Some(s) => s,
        None => {
            default_space = Space::cube(m)?;
            &default_space
        }
    };
    if space.dim() != m {
        return Err(HarnessError::Config(format!("file has m = {m}, space has m = {}", space.dim())));
    }
    let mut ledger = ScoreLedger::for_space(space);
    let mut sides: Vec<SideTally> = side_cols.iter().map(|_| SideTally::new(space.centroid(), false)).collect();
    let mut record = csv::StringRecord::new();
    let mut expected_t = 1u64;
    while reader.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| HarnessError::Input { line, message };
        if record.len() != 1 + 2 * m + side_cols.len() {
            return Err(err(format!("expected {} fields, found {}", 1 + 2 * m + side_cols.len(), record.len())));
        }
        let t: u64 = record[0].trim().parse().map_err(|_| err(format!("bad t value {:?}", &record[0])))?;
        if t != expected_t {
            return Err(err(format!("expected t = {expected_t}, found {t}")));
        }
        expected_t += 1;
        let num = |i: usize| -> Result<f64> {
            let v: f64 = record[i].trim().parse().map_err(|_| err(format!("bad number {:?}", &record[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("non-finite value {:?}", &record[i])))
            }
        };
        let a: Point = (1..=m).map(num).collect::<Result<_>>()?;
        let c: Point = (m + 1..=2 * m).map(num).collect::<Result<_>>()?;
        if !space.contains(&a) {
            return Err(err(format!("action {a:?} outside the forecast set")));
        }
        if !space.contains(&c) {
            return Err(err(format!("forecast {c:?} outside the forecast set")));
        }
        ledger.record(&a, &c, BinKey::exact(&c))?;
        for (n, tally) in sides.iter_mut().enumerate() {
            tally.observe(BinKey::label(record[1 + 2 * m + n].trim()), &a)?;
        }
    }
    let s = ledger.scores()?;
    let side = side_cols
        .iter()
        .zip(&sides)
        .map(|(col, tally)| {
            let r = tally.table.refinement();
            SideScore { column: col.clone(), bins: tally.bins(), refinement: r, beat: s.brier - r }
        })
        .collect();
    Ok(FileScores {
        t: s.t,
        m,
        brier: s.brier,
        k_l2: s.calibration_l2,
        k_l1: s.calibration_l1,
        refinement: s.refinement,
        online_refinement: s.online_refinement,
        residual: s.brier - s.refinement - s.calibration_l2,
        bins: ledger.n_distinct(),
        online_gap_bound: online_gap_bound(space.diameter(), ledger.n_distinct(), s.t),
        side,
    })
}

pub fn score_file(path: &Path, space: Option<&Space>) -> Result<FileScores> {
    score_reader(std::fs::File::open(path)?, space)
}

/// Scores of one fixed forecaster of the rain example at time `t`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Figure1Row {
    pub forecaster: String,
    pub t: usize,
    #[serde(rename = "K")]
    pub calibration: f64,
    #[serde(rename = "R")]
    pub refinement: f64,
    #[serde(rename = "B")]
    pub brier: f64,
}

/// Rain on odd days, dry on even days; `F1` forecasts 1,0,1,0,… and `F2`
/// forecasts 0.5 throughout. Rows for every `t ≤ t_max`.
pub fn figure1(t_max: usize) -> Result<Vec<Figure1Row>> {
    let forecasters: [(&str, fn(usize) -> f64); 2] =
        [("F1", |t| if t % 2 == 1 { 1.0 } else { 0.0 }), ("F2", |_| 0.5)];
    let mut rows = Vec::new();
    for (name, f) in forecasters {
        let mut ledger = ScoreLedger::new(vec![0.5]);
        for t in 1..=t_max {
            let a = if t % 2 == 1 { 1.0 } else { 0.0 };
            let c = f(t);
            ledger.record(&[a], &[c], BinKey::exact(&[c]))?;
            let s = ledger.scores()?;
            rows.push(Figure1Row {
                forecaster: name.to_string(),
                t,
                calibration: s.calibration_l2,
                refinement: s.refinement,
                brier: s.brier,
            });
        }
    }
    Ok(rows)
}

/// Monte Carlo check of the calibeating lower bound against exchangeable
/// beta-binomial actions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowerBoundReport {
    pub alpha: f64,
    pub t: usize,
    pub reps: usize,
    pub lambda: f64,
    /// `0.9 λ ln t / t`.
    pub threshold: f64,
    pub mean_gap: f64,
    pub gap_stderr: f64,
    /// `λ − λ/t`.
    pub expected_r: f64,
    pub mean_r: f64,
    pub r_stderr: f64,
    pub mean_abar: f64,
    pub abar_stderr: f64,
    pub var_abar: f64,
    pub var_abar_stderr: f64,
    /// `(t + 2α)/(4(2α + 1)t)`.
    pub expected_var_abar: f64,
    pub pass_gap: bool,
    pub pass_moments: bool,
}

/// Simple calibeating with a constant side forecast against beta-binomial
/// actions; seeds `seed..seed+reps`.
pub fn lower_bound(alpha: f64, t: usize, reps: usize, seed: u64, workers: Option<usize>) -> Result<LowerBoundReport> {
    if t == 0 || reps < 2 {
        return Err(HarnessError::Config("lower bound needs t >= 1 and at least two replications".into()));
    }
    let seeds: Vec<u64> = (0..reps as u64).map(|i| seed.wrapping_add(i)).collect();
    let space = Space::cube(1)?;
    let samples = map_seeds(&seeds, worker_count(workers), |_, s| {
        let mut f = SimpleCalibeat::new(&space);
        let mut src = BetaBinomialSource::new(alpha, substream(s, 1))?;
        let side = [BinKey::Index(0)];
        let mut ledger = ScoreLedger::new(space.centroid());
        let mut table = BinTable::new(space.centroid());
        for _ in 0..t {
            let d = f.next(&side)?;
            let a = src.next_action(None)?;
            f.update(&a)?;
            ledger.record(&a, &d.forecast, d.key)?;
            table.observe(side[0].clone(), &a)?;
        }
        let r = table.refinement();
        let abar = table.mean(&side[0]).map_or(0.5, |m| m[0]);
        Ok((ledger.brier()? - r, r, abar))
    })?;
    let gaps: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let rs: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let abars: Vec<f64> = samples.iter().map(|s| s.2).collect();
    let (mean_gap, gap_stderr) = mean_stderr(&gaps);
    let (mean_r, r_stderr) = mean_stderr(&rs);
    let (mean_abar, abar_stderr) = mean_stderr(&abars);
    let n = reps as f64;
    let centered: Vec<f64> = abars.iter().map(|a| (a - mean_abar).powi(2)).collect();
    let var_abar = centered.iter().sum::<f64>() / (n - 1.0);
    let m4 = abars.iter().map(|a| (a - mean_abar).powi(4)).sum::<f64>() / n;
    let var_abar_stderr = ((m4 - var_abar * var_abar).max(0.0) / n).sqrt();
    let lambda = BetaBinomialSource::lambda(alpha);
    let tf = t as f64;
    let threshold = 0.9 * lambda * tf.ln() / tf;
    let expected_var_abar = BetaBinomialSource::mean_variance(alpha, t);
    Ok(LowerBoundReport {
        alpha,
        t,
        reps,
        lambda,
        threshold,
        mean_gap,
        gap_stderr,
        expected_r: lambda - lambda / tf,
        mean_r,
        r_stderr,
        mean_abar,
        abar_stderr,
        var_abar,
        var_abar_stderr,
        expected_var_abar,
        pass_gap: mean_gap >= threshold,
        pass_moments: (mean_abar - 0.5).abs() <= 4.0 * abar_stderr
            && (var_abar - expected_var_abar).abs() <= 4.0 * var_abar_stderr,
    })
}


#[cfg(test)]
mod tests {
    use super::*;

    fn small(procedure: ProcedureSpec, source: SourceSpec, side: Vec<SideSpec>, t: usize) -> ExperimentConfig {
        ExperimentConfig {
            procedure: Some(procedure),
            source,
            side,
            t,
            ..ExperimentConfig::preset("simple-bound").unwrap()
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let ok = r#"{"space":{"kind":"cube","dim":1},"procedure":{"name":"simple_calibeat"},
                     "source":{"kind":"adaptive"},"side":[{"kind":"constant"}],"t":10}"#;
        assert!(ExperimentConfig::from_json(ok).is_ok());
        let bad_top = ok.replace("\"t\":10", "\"t\":10,\"bogus\":1");
        assert!(ExperimentConfig::from_json(&bad_top).is_err());
        let bad_proc = ok.replace("\"simple_calibeat\"", "\"simple_calibeat\",\"x\":2");
        assert!(ExperimentConfig::from_json(&bad_proc).is_err());
        let bad_unit = ok.replace("{\"kind\":\"adaptive\"}", "{\"kind\":\"adaptive\",\"p\":1}");
        assert!(ExperimentConfig::from_json(&bad_unit).is_err());
    }

    #[test]
    fn presets_round_trip() {
        for name in ExperimentConfig::PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg, "{name}");
        }
        assert!(ExperimentConfig::preset("nope").is_none());
    }

    #[test]
    fn substreams_differ() {
        assert_ne!(substream(1, 0), substream(1, 1));
        assert_ne!(substream(1, 0), substream(2, 0));
    }

    #[test]
    fn trace_is_prefix_consistent() {
        let cfg = small(ProcedureSpec::SimpleCalibeat { rounding: None }, SourceSpec::Adaptive {}, vec![SideSpec::Cycle { period: 2 }], 200);
        let out = run(&cfg).unwrap();
        let trace = out.trace.unwrap();
        let mut sum = 0.0;
        for row in &trace.rows {
            sum += row.sq_err;
            assert!((row.brier - sum / row.t as f64).abs() < 1e-12);
        }
        assert!(out.summary.all_pass());
        assert_eq!(trace.header()[..4], ["t", "a_1", "b_1", "c_1"].map(String::from));
    }

    #[test]
    fn run_is_reproducible() {
        let mut cfg = small(
            ProcedureSpec::CalibratedForecaster { resolution: Some(4) },
            SourceSpec::Adaptive {},
            vec![],
            100,
        );
        cfg.reps = 3;
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.trace.unwrap().to_csv_string().unwrap(), b.trace.unwrap().to_csv_string().unwrap());
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn missing_side_is_config_error() {
        let cfg = small(ProcedureSpec::SimpleCalibeat { rounding: None }, SourceSpec::Adaptive {}, vec![], 10);
        assert!(matches!(run(&cfg), Err(HarnessError::Config(_))));
    }

    #[test]
    fn score_reader_figure_one() {
        let csv = "t,a_1,c_1,b_1\n1,1,0.5,x\n2,0,0.5,y\n3,1,0.5,x\n4,0,0.5,y\n5,1,0.5,x\n6,0,0.5,y\n";
        let s = score_reader(csv.as_bytes(), None).unwrap();
        assert_eq!((s.brier, s.k_l2, s.refinement), (0.25, 0.0, 0.25));
        assert_eq!(s.side[0].refinement, 0.0);
        assert_eq!(s.side[0].beat, 0.25);
    }

    #[test]
    fn score_reader_errors_carry_lines() {
        let bad = "t,a_1,c_1\n1,1,0.5\n2,0,1.5\n";
        match score_reader(bad.as_bytes(), None) {
            Err(HarnessError::Input { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(score_reader("x,a_1,c_1\n".as_bytes(), None), Err(HarnessError::Input { line: 1, .. })));
        assert!(matches!(score_reader("t,a_1,c_2\n".as_bytes(), None), Err(HarnessError::Input { line: 1, .. })));
    }

    #[test]
    fn figure_one_table() {
        let rows = figure1(4).unwrap();
        let f2_t4 = rows.iter().find(|r| r.forecaster == "F2" && r.t == 4).unwrap();
        assert_eq!((f2_t4.calibration, f2_t4.brier), (0.0, 0.25));
        let f2_t3 = rows.iter().find(|r| r.forecaster == "F2" && r.t == 3).unwrap();
        assert!((f2_t3.calibration - 1.0 / 36.0).abs() < 1e-15);
    }

    #[test]
    fn compare_ranks_by_brier() {
        let cfg = ExperimentConfig { t: 20, ..ExperimentConfig::preset("figure1").unwrap() };
        let (report, _) = compare(&cfg).unwrap();
        assert_eq!(report.rows[0].procedure, "pattern");
        assert_eq!(report.rows[0].brier, 0.0);
        assert_eq!(report.rows[1].brier, 0.25);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("rank,procedure,B,R,K_l2,K_l1,bound"));
    }
}
