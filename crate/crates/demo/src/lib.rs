//! WebAssembly bindings for the demo page. Every export takes and returns
//! JSON strings.

use calibeat::geometry::Grid;
use calibeat::harness::{self, ExperimentConfig};
use calibeat::solvers::{outgoing_mm, outgoing_payoff, Probe, EXACT_TOL};
use calibeat::Space;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Longest horizon the page will run.
pub const MAX_T: usize = 20_000;

#[derive(Serialize)]
struct RunView {
    summary: harness::Summary,
    t: Vec<usize>,
    brier: Vec<f64>,
    calibration: Vec<f64>,
    refinement: Vec<f64>,
    /// `R^b` of the first side forecast, if any.
    side_refinement: Vec<f64>,
    bound: Vec<f64>,
}

/// Runs one replication of `config` and returns the summary plus a
/// thinned score series.
pub fn run_json(config: &str) -> Result<String, String> {
    let mut cfg = ExperimentConfig::from_json(config).map_err(|e| e.to_string())?;
    if cfg.t > MAX_T {
        return Err(format!("t is capped at {MAX_T} in the browser"));
    }
    cfg.reps = 1;
    cfg.seeds = None;
    cfg.trace = true;
    let out = harness::run(&cfg).map_err(|e| e.to_string())?;
    let trace = out.trace.ok_or("no trace")?;
    let side_col = trace.extra_columns.iter().position(|c| c == "R_b_1");
    let stride = (trace.rows.len() / 500).max(1);
    let rows: Vec<_> =
        trace.rows.iter().enumerate().filter(|(i, _)| (i + 1) % stride == 0 || *i == 0).map(|(_, r)| r).collect();
    let view = RunView {
        t: rows.iter().map(|r| r.t).collect(),
        brier: rows.iter().map(|r| r.brier).collect(),
        calibration: rows.iter().map(|r| r.k_l2).collect(),
        refinement: rows.iter().map(|r| r.r).collect(),
        side_refinement: side_col.map_or_else(Vec::new, |c| rows.iter().map(|r| r.extra[c]).collect()),
        bound: rows.iter().map(|r| r.bound).collect(),
        summary: out.summary,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct OutgoingView {
    grid: Vec<f64>,
    g: Vec<f64>,
    support: Vec<(f64, f64)>,
    guarantee: f64,
    target: f64,
    /// Expected payoff at 101 probe points of `[0, 1]`.
    probe: Vec<(f64, f64)>,
}

/// Outgoing minimax on `[0, 1]` for `g` given by its values on an evenly
/// spaced grid (`values` is a JSON array of at least two numbers).
pub fn outgoing_json(values: &str) -> Result<String, String> {
    let g: Vec<f64> = serde_json::from_str(values).map_err(|e| e.to_string())?;
    if g.len() < 2 || g.len() > 201 {
        return Err("give between 2 and 201 values".into());
    }
    let space = Space::cube(1).map_err(|e| e.to_string())?;
    let grid = Grid::regular(&space, (g.len() - 1) as u32).map_err(|e| e.to_string())?;
    let g_points: Vec<Vec<f64>> = g.iter().map(|v| vec![*v]).collect();
    let eta = outgoing_mm(&space, &g_points, &grid, Probe::Vertices, EXACT_TOL).map_err(|e| e.to_string())?;
    let probe = (0..=100)
        .map(|k| {
            let x = k as f64 / 100.0;
            outgoing_payoff(&eta, &g_points, &space, &[x]).map(|v| (x, v))
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let view = OutgoingView {
        grid: grid.points().iter().map(|p| p[0]).collect(),
        g,
        support: eta.support.iter().map(|(_, p, w)| (p[0], *w)).collect(),
        guarantee: eta.guarantee,
        target: grid.delta().powi(2),
        probe,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

/// Calibration, refinement and Brier scores of the two rain forecasters.
pub fn figure1_json(t_max: usize) -> Result<String, String> {
    if t_max == 0 || t_max > 1_000 {
        return Err("t must be between 1 and 1000".into());
    }
    let rows = harness::figure1(t_max).map_err(|e| e.to_string())?;
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn run(config: &str) -> Result<String, JsValue> {
    run_json(config).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn outgoing(values: &str) -> Result<String, JsValue> {
    outgoing_json(values).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn figure1(t_max: usize) -> Result<String, JsValue> {
    figure1_json(t_max).map_err(|e| JsValue::from_str(&e))
}
