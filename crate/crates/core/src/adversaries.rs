//! Action sequences and side forecasts.
//!
//! Oblivious sources are never handed the current forecast. Adaptive
//! sources see the forecast before choosing `a_t`; for randomized
//! procedures they see the mean of the forecast distribution, never the
//! draw.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::BinKey;
use crate::geometry::{Point, Space};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("pattern is empty")]
    EmptyPattern,
    #[error("{0:?} is not an action")]
    NotAnAction(Point),
    #[error("invalid probabilities: {0}")]
    InvalidProbabilities(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("adaptive source needs the current forecast")]
    MissingForecast,
}

pub type Result<T> = std::result::Result<T, SourceError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    Oblivious,
    Adaptive,
}

pub trait ActionSource: Send {
    fn mode(&self) -> SourceMode;
    /// `forecast` is `Some(..)` for adaptive sources and `None` otherwise.
    fn next_action(&mut self, forecast: Option<&[f64]>) -> Result<Point>;
}

/// Cycles a fixed list of actions.
#[derive(Clone, Debug)]
pub struct PatternSource {
    pattern: Vec<Point>,
    next: usize,
}

impl PatternSource {
    pub fn new(space: &Space, pattern: Vec<Point>) -> Result<Self> {
        if pattern.is_empty() {
            return Err(SourceError::EmptyPattern);
        }
        if let Some(p) = pattern.iter().find(|p| !space.is_action(p)) {
            return Err(SourceError::NotAnAction(p.clone()));
        }
        Ok(Self { pattern, next: 0 })
    }
}

impl ActionSource for PatternSource {
    fn mode(&self) -> SourceMode {
        SourceMode::Oblivious
    }

    fn next_action(&mut self, _: Option<&[f64]>) -> Result<Point> {
        let a = self.pattern[self.next].clone();
        self.next = (self.next + 1) % self.pattern.len();
        Ok(a)
    }
}

/// I.i.d. draws from a categorical distribution over the actions of `A`.
#[derive(Clone, Debug)]
pub struct IidSource {
    actions: Vec<Point>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl IidSource {
    /// `probs[k]` is the probability of `space.actions()[k]`.
    pub fn new(space: &Space, probs: &[f64], seed: u64) -> Result<Self> {
        let actions = space.actions().to_vec();
        if probs.len() != actions.len() {
            return Err(SourceError::InvalidProbabilities(format!(
                "expected {} probabilities, got {}",
                actions.len(),
                probs.len()
            )));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(SourceError::InvalidProbabilities(format!("{probs:?} is not a probability vector")));
        }
        let dist = WeightedIndex::new(probs).map_err(|e| SourceError::InvalidProbabilities(e.to_string()))?;
        Ok(Self { actions, dist, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Bernoulli(`p`) actions on `[0, 1]`.
    pub fn bernoulli(p: f64, seed: u64) -> Result<Self> {
        let space = Space::cube(1).expect("unit interval");
        Self::new(&space, &[1.0 - p, p], seed)
    }
}

impl ActionSource for IidSource {
    fn mode(&self) -> SourceMode {
        SourceMode::Oblivious
    }

    fn next_action(&mut self, _: Option<&[f64]>) -> Result<Point> {
        Ok(self.actions[self.dist.sample(&mut self.rng)].clone())
    }
}

/// Exchangeable binary actions: `θ ∼ Beta(α, α)`, `a_t | θ ∼ Bernoulli(θ)`,
/// sampled sequentially through the posterior predictive
/// `P[a_{t+1} = 1 | a_1..a_t] = (successes + α)/(t + 2α)`.
#[derive(Clone, Debug)]
pub struct BetaBinomialSource {
    alpha: f64,
    successes: u64,
    trials: u64,
    rng: ChaCha8Rng,
}

impl BetaBinomialSource {
    pub fn new(alpha: f64, seed: u64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(SourceError::InvalidParam(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha, successes: 0, trials: 0, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Probability that the next action is 1.
    pub fn predictive(&self) -> f64 {
        (self.successes as f64 + self.alpha) / (self.trials as f64 + 2.0 * self.alpha)
    }

    /// `λ = α / (2(2α + 1))`.
    pub fn lambda(alpha: f64) -> f64 {
        alpha / (2.0 * (2.0 * alpha + 1.0))
    }

    /// `Var[ā_t] = (t + 2α) / (4(2α + 1) t)`.
    pub fn mean_variance(alpha: f64, t: usize) -> f64 {
        let t = t as f64;
        (t + 2.0 * alpha) / (4.0 * (2.0 * alpha + 1.0) * t)
    }
}

impl ActionSource for BetaBinomialSource {
    fn mode(&self) -> SourceMode {
        SourceMode::Oblivious
    }

    fn next_action(&mut self, _: Option<&[f64]>) -> Result<Point> {
        let u: f64 = self.rng.gen();
        let one = u < self.predictive();
        self.trials += 1;
        if one {
            self.successes += 1;
        }
        Ok(vec![if one { 1.0 } else { 0.0 }])
    }
}

/// Plays the action farthest from the current forecast, ties toward the
/// lexicographically largest action.
#[derive(Clone, Debug)]
pub struct AdaptiveWorstCase {
    space: Space,
}

impl AdaptiveWorstCase {
    pub fn new(space: &Space) -> Self {
        Self { space: space.clone() }
    }
}

impl ActionSource for AdaptiveWorstCase {
    fn mode(&self) -> SourceMode {
        SourceMode::Adaptive
    }

    fn next_action(&mut self, forecast: Option<&[f64]>) -> Result<Point> {
        let c = forecast.ok_or(SourceError::MissingForecast)?;
        Ok(self.space.farthest_action(c).clone())
    }
}

/// Side forecasts `b_t`, indexed by the period `t ≥ 1`.
#[derive(Clone, Debug)]
pub enum SideSource {
    Constant(BinKey),
    /// `b_t = t mod period` (period 2 is day parity).
    Cycle(usize),
    Pattern(Vec<BinKey>),
    Random { bins: usize, rng: ChaCha8Rng },
}

impl SideSource {
    pub fn constant() -> Self {
        SideSource::Constant(BinKey::Index(0))
    }

    pub fn cycle(period: usize) -> Result<Self> {
        if period == 0 {
            return Err(SourceError::InvalidParam("cycle period must be positive".into()));
        }
        Ok(SideSource::Cycle(period))
    }

    pub fn pattern(keys: Vec<BinKey>) -> Result<Self> {
        if keys.is_empty() {
            return Err(SourceError::EmptyPattern);
        }
        Ok(SideSource::Pattern(keys))
    }

    pub fn random(bins: usize, seed: u64) -> Result<Self> {
        if bins == 0 {
            return Err(SourceError::InvalidParam("need at least one bin".into()));
        }
        Ok(SideSource::Random { bins, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Number of distinct values this source can emit.
    pub fn alphabet(&self) -> usize {
        match self {
            SideSource::Constant(_) => 1,
            SideSource::Cycle(k) => *k,
            SideSource::Pattern(keys) => {
                let mut k = keys.clone();
                k.sort();
                k.dedup();
                k.len()
            }
            SideSource::Random { bins, .. } => *bins,
        }
    }

    pub fn next_key(&mut self, t: usize) -> BinKey {
        match self {
            SideSource::Constant(k) => k.clone(),
            SideSource::Cycle(k) => BinKey::Index(t % *k),
            SideSource::Pattern(keys) => keys[(t - 1) % keys.len()].clone(),
            SideSource::Random { bins, rng } => BinKey::Index(rng.gen_range(0..*bins)),
        }
    }
}
