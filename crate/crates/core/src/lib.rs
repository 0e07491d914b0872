//! Calibeating: online score ledgers and forecasting procedures that beat
//! the Brier score of other forecasters by their calibration score.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: forecast sets, grids, projections, diameter and
//!   bounding-ball constants.
//! * [`binning`]: exact bin bookkeeping with online (Welford-type) variance
//!   updates, joint keys and fractional (hat-function) binnings.
//! * [`scores`]: Brier / calibration / refinement ledgers, their online
//!   counterparts, and the logarithmic family.
//! * [`solvers`]: zero-sum matrix games and the "outgoing" primitives built
//!   on them, plus the 1-D outgoing fixed point.
//! * [`procedures`]: every forecaster behind the [`procedures::Forecaster`]
//!   interface.
//! * [`adversaries`]: action and side-forecast generators.
//! * [`harness`]: experiment configuration, replication, CSV/JSON output and
//!   bound checks.
//!
//! ```
//! use calibeat::procedures::SimpleCalibeat;
//! use calibeat::{BinKey, Forecaster, ScoreLedger, Space};
//!
//! # fn main() -> Result<(), Box<dyn std::error::Error>> {
//! let space = Space::cube(1)?;
//! let mut f = SimpleCalibeat::new(&space);
//! let mut ledger = ScoreLedger::for_space(&space);
//! for (t, a) in [1.0, 0.0, 1.0, 1.0].into_iter().enumerate() {
//!     let d = f.next(&[BinKey::Index(t % 2)])?;
//!     f.update(&[a])?;
//!     ledger.record(&[a], &d.forecast, d.key)?;
//! }
//! let s = ledger.scores()?;
//! assert!((s.brier - s.refinement - s.calibration_l2).abs() < 1e-12);
//! # Ok(())
//! # }
//! ```

pub mod adversaries;
pub mod binning;
pub mod geometry;
pub mod harness;
pub mod procedures;
pub mod scores;
pub mod solvers;

pub use binning::{BinKey, BinStats, BinTable, FractionalBinning};
pub use geometry::{Grid, LogGrid, Point, Space, SpaceKind};
pub use procedures::{ForecastDecision, Forecaster};
pub use scores::{FractionalLedger, LogScoreLedger, ScoreLedger};
