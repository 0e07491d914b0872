//! Bins, exact online averages/variances, joint and fractional binnings.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{dist2, Point};

/// Weights below this are treated as zero by weighted updates.
pub const MIN_WEIGHT: f64 = 1e-15;

const AGGREGATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BinningError {
    #[error("non-finite value")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("weight {0} outside [0, 1]")]
    WeightOutOfRange(f64),
    #[error("tables hold different total weight ({fine} vs {coarse})")]
    MismatchedTotals { fine: f64, coarse: f64 },
    #[error("invalid fractional binning: {0}")]
    InvalidBinning(String),
}

pub type Result<T> = std::result::Result<T, BinningError>;

/// Exact, discrete bin identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinKey {
    /// Opaque label from a side-forecast alphabet.
    Label(String),
    /// Integer index (e.g. day parity, expert bucket).
    Index(usize),
    /// Integer lattice coordinates of a grid point.
    Lattice(Vec<i64>),
    /// Bit patterns of an exact floating-point vector.
    Bits(Vec<u64>),
    /// Tuple of keys.
    Joint(Vec<BinKey>),
}

impl BinKey {
    pub fn label(s: impl Into<String>) -> Self {
        BinKey::Label(s.into())
    }

    /// Key that identifies a vector by its exact bit pattern (`-0.0` is
    /// folded into `0.0`).
    pub fn exact(x: &[f64]) -> Self {
        BinKey::Bits(x.iter().map(|v| if *v == 0.0 { 0u64 } else { v.to_bits() }).collect())
    }
}

impl fmt::Display for BinKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinKey::Label(s) => write!(f, "{s}"),
            BinKey::Index(i) => write!(f, "#{i}"),
            BinKey::Lattice(k) => {
                let parts: Vec<String> = k.iter().map(i64::to_string).collect();
                write!(f, "L{}", parts.join(":"))
            }
            BinKey::Bits(b) => {
                let parts: Vec<String> = b.iter().map(|v| f64::from_bits(*v).to_string()).collect();
                write!(f, "{}", parts.join(":"))
            }
            BinKey::Joint(ks) => {
                let parts: Vec<String> = ks.iter().map(|k| k.to_string()).collect();
                write!(f, "({})", parts.join("|"))
            }
        }
    }
}

/// Tuple key for a joint binning. Nested joint keys are flattened, so a
/// joint of N keys equals nested pairwise joins taken in order.
pub fn joint_key(keys: &[BinKey]) -> BinKey {
    let mut out = Vec::with_capacity(keys.len());
    for k in keys {
        match k {
            BinKey::Joint(inner) => out.extend(inner.iter().cloned()),
            other => out.push(other.clone()),
        }
    }
    BinKey::Joint(out)
}

/// Weighted count, mean, squared-deviation sum and online squared-deviation
/// sum of the values that fell into one bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub weight: f64,
    pub mean: Point,
    pub m2: f64,
    pub online_sq_sum: f64,
}

impl BinStats {
    pub fn new(dim: usize) -> Self {
        Self { weight: 0.0, mean: vec![0.0; dim], m2: 0.0, online_sq_sum: 0.0 }
    }

    /// `Σ λ_i x_i`.
    pub fn sum(&self) -> Point {
        self.mean.iter().map(|v| v * self.weight).collect()
    }

    /// Weighted variance `m2 / Λ` (zero for an empty bin).
    pub fn variance(&self) -> f64 {
        if self.weight > 0.0 {
            self.m2 / self.weight
        } else {
            0.0
        }
    }

    /// Weighted Welford step. `prev` is the average the online term is
    /// measured against (the bin mean, or the prior for an empty bin).
    fn push(&mut self, x: &[f64], lambda: f64, prev: &[f64]) {
        self.online_sq_sum += lambda * dist2(x, prev);
        let new_weight = self.weight + lambda;
        if self.weight == 0.0 {
            self.mean.copy_from_slice(x);
        } else {
            let d2 = dist2(x, &self.mean);
            let frac = lambda / new_weight;
            self.m2 += lambda * (1.0 - frac) * d2;
            for (m, xi) in self.mean.iter_mut().zip(x) {
                *m += frac * (xi - *m);
            }
        }
        self.weight = new_weight;
    }
}

/// Pre-update state of a bin, returned by every observation.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateReceipt {
    pub prev_average: Point,
    pub prev_count: f64,
}

/// Map from bin keys to statistics.
#[derive(Clone, Debug)]
pub struct BinTable {
    dim: usize,
    bins: BTreeMap<BinKey, BinStats>,
    prior: Point,
    regularizer: Option<Point>,
    total: f64,
}

impl BinTable {
    /// Plain table; empty bins report `prior` as their average.
    pub fn new(prior: Point) -> Self {
        Self { dim: prior.len(), bins: BTreeMap::new(), prior, regularizer: None, total: 0.0 }
    }

    /// Log-mode table: every bin starts with one pseudo-observation `g0`,
    /// so averages are `(sum + g0)/(n + 1)`.
    pub fn regularized(g0: Point) -> Self {
        Self { dim: g0.len(), bins: BTreeMap::new(), prior: g0.clone(), regularizer: Some(g0), total: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prior(&self) -> &Point {
        &self.prior
    }

    pub fn regularizer(&self) -> Option<&Point> {
        self.regularizer.as_ref()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(BinningError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(BinningError::NonFinite);
        }
        Ok(())
    }

    pub fn observe(&mut self, key: BinKey, x: &[f64]) -> Result<UpdateReceipt> {
        self.observe_weighted(key, x, 1.0)
    }

    /// Weighted observation; weights below [`MIN_WEIGHT`] leave the table
    /// untouched.
    pub fn observe_weighted(&mut self, key: BinKey, x: &[f64], lambda: f64) -> Result<UpdateReceipt> {
        self.check(x)?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(BinningError::WeightOutOfRange(lambda));
        }
        let prev_average = self.average(&key);
        let prev_count = self.count(&key);
        if lambda >= MIN_WEIGHT {
            let dim = self.dim;
            let stats = self.bins.entry(key).or_insert_with(|| BinStats::new(dim));
            stats.push(x, lambda, &prev_average);
            self.total += lambda;
        }
        Ok(UpdateReceipt { prev_average, prev_count })
    }

    pub fn stats(&self, key: &BinKey) -> Option<&BinStats> {
        self.bins.get(key)
    }

    pub fn count(&self, key: &BinKey) -> f64 {
        self.bins.get(key).map_or(0.0, |s| s.weight)
    }

    /// Raw bin mean, `None` for an empty bin.
    pub fn mean(&self, key: &BinKey) -> Option<&Point> {
        self.bins.get(key).filter(|s| s.weight > 0.0).map(|s| &s.mean)
    }

    /// Bin average as used by forecasting procedures: the mean, the prior
    /// for an empty bin, or the regularized mean in log mode.
    pub fn average(&self, key: &BinKey) -> Point {
        match (&self.regularizer, self.bins.get(key)) {
            (Some(g0), Some(s)) => {
                s.mean.iter().zip(g0).map(|(m, g)| (m * s.weight + g) / (s.weight + 1.0)).collect()
            }
            (Some(g0), None) => g0.clone(),
            (None, Some(s)) if s.weight > 0.0 => s.mean.clone(),
            (None, _) => self.prior.clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BinKey, &BinStats)> {
        self.bins.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &BinKey> {
        self.bins.keys()
    }

    /// Number of nonempty bins.
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Total weight (number of observations for hard binnings).
    pub fn total_weight(&self) -> f64 {
        self.total
    }

    /// `Σ_x (n(x)/t) v(x) = Σ m2 / t`.
    pub fn refinement(&self) -> f64 {
        if self.total == 0.0 {
            return 0.0;
        }
        self.bins.values().map(|s| s.m2).sum::<f64>() / self.total
    }

    /// `(1/t) Σ_s λ_s ‖x_s − x̄_{s−1}‖²` over all bins.
    pub fn online_refinement(&self) -> f64 {
        if self.total == 0.0 {
            return 0.0;
        }
        self.bins.values().map(|s| s.online_sq_sum).sum::<f64>() / self.total
    }
}

/// Result of comparing a fine table with a candidate coarsening of it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoarseningCheck {
    pub is_coarsening: bool,
    pub r_fine: f64,
    pub r_coarse: f64,
}

/// Check that `coarse` aggregates `fine` under `phi` (counts and sums
/// match per coarse key) and report both refinement scores.
pub fn refinement_of(
    fine: &BinTable,
    coarse: &BinTable,
    phi: impl Fn(&BinKey) -> BinKey,
) -> Result<CoarseningCheck> {
    let (tf, tc) = (fine.total_weight(), coarse.total_weight());
    if (tf - tc).abs() > AGGREGATION_TOL * tf.max(1.0) {
        return Err(BinningError::MismatchedTotals { fine: tf, coarse: tc });
    }
    let mut agg: BTreeMap<BinKey, (f64, Point)> = BTreeMap::new();
    for (k, s) in fine.iter() {
        let entry = agg.entry(phi(k)).or_insert_with(|| (0.0, vec![0.0; fine.dim()]));
        entry.0 += s.weight;
        for (acc, v) in entry.1.iter_mut().zip(s.sum()) {
            *acc += v;
        }
    }
    let mut is_coarsening = agg.len() == coarse.len();
    if is_coarsening {
        for (k, (w, sum)) in &agg {
            match coarse.stats(k) {
                Some(s) => {
                    let scale = w.max(1.0);
                    is_coarsening &= (s.weight - w).abs() <= AGGREGATION_TOL * scale
                        && s.sum().iter().zip(sum).all(|(a, b)| (a - b).abs() <= AGGREGATION_TOL * scale);
                }
                None => is_coarsening = false,
            }
        }
    }
    Ok(CoarseningCheck { is_coarsening, r_fine: fine.refinement(), r_coarse: coarse.refinement() })
}

/// A finite continuous partition of unity `Π = (w_i)` on `C`.
///
/// Either the trivial binning `w ≡ 1`, or tensor products of 1-D hat
/// functions over a knot vector shared by all axes (for `m = 1` these are
/// exactly the tents peaking at each knot).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FractionalBinning {
    Single,
    Hats { knots: Vec<f64> },
}

impl FractionalBinning {
    pub fn single() -> Self {
        FractionalBinning::Single
    }

    /// Hat functions over strictly increasing knots.
    pub fn hats(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(BinningError::InvalidBinning("need at least two knots".into()));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BinningError::InvalidBinning("knots must be finite and strictly increasing".into()));
        }
        Ok(FractionalBinning::Hats { knots })
    }

    /// `resolution + 1` evenly spaced knots on `[0, 1]`.
    pub fn uniform_hats(resolution: u32) -> Result<Self> {
        if resolution == 0 {
            return Err(BinningError::InvalidBinning("resolution must be at least 1".into()));
        }
        Self::hats((0..=resolution).map(|i| i as f64 / resolution as f64).collect())
    }

    pub fn knots(&self) -> Option<&[f64]> {
        match self {
            FractionalBinning::Single => None,
            FractionalBinning::Hats { knots } => Some(knots),
        }
    }

    /// Nonzero weights `(i, w_i(c))`, ordered by `i`. Coordinates outside
    /// the knot range are clamped.
    pub fn weights(&self, c: &[f64]) -> Vec<(BinKey, f64)> {
        match self {
            FractionalBinning::Single => vec![(BinKey::Index(0), 1.0)],
            FractionalBinning::Hats { knots } => {
                let per_axis: Vec<Vec<(i64, f64)>> = c.iter().map(|&x| hat_weights(knots, x)).collect();
                let mut out: Vec<(Vec<i64>, f64)> = vec![(Vec::with_capacity(c.len()), 1.0)];
                for axis in per_axis {
                    let mut next = Vec::with_capacity(out.len() * axis.len());
                    for (idx, w) in &out {
                        for &(i, wi) in &axis {
                            let mut k = idx.clone();
                            k.push(i);
                            next.push((k, w * wi));
                        }
                    }
                    out = next;
                }
                out.into_iter().map(|(k, w)| (BinKey::Lattice(k), w)).collect()
            }
        }
    }
}

fn hat_weights(knots: &[f64], x: f64) -> Vec<(i64, f64)> {
    let last = knots.len() - 1;
    if x <= knots[0] {
        return vec![(0, 1.0)];
    }
    if x >= knots[last] {
        return vec![(last as i64, 1.0)];
    }
    // knots[j] <= x < knots[j + 1]
    let j = knots.partition_point(|&k| k <= x) - 1;
    let frac = (x - knots[j]) / (knots[j + 1] - knots[j]);
    if frac == 0.0 {
        vec![(j as i64, 1.0)]
    } else {
        vec![(j as i64, 1.0 - frac), (j as i64 + 1, frac)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offline_m2(xs: &[(Vec<f64>, f64)]) -> f64 {
        let w: f64 = xs.iter().map(|(_, l)| l).sum();
        let dim = xs[0].0.len();
        let mut mean = vec![0.0; dim];
        for (x, l) in xs {
            for d in 0..dim {
                mean[d] += l * x[d] / w;
            }
        }
        xs.iter().map(|(x, l)| l * dist2(x, &mean)).sum()
    }

    #[test]
    fn single_observation() {
        let mut t = BinTable::new(vec![0.5]);
        let r = t.observe(BinKey::Index(0), &[3.0]).unwrap();
        assert_eq!(r.prev_average, vec![0.5]);
        assert_eq!(r.prev_count, 0.0);
        let s = t.stats(&BinKey::Index(0)).unwrap();
        assert_eq!((s.weight, s.mean[0], s.m2), (1.0, 3.0, 0.0));
    }

    #[test]
    fn welford_increment() {
        let mut t = BinTable::new(vec![0.5]);
        let k = BinKey::Index(0);
        t.observe(k.clone(), &[0.0]).unwrap();
        t.observe(k.clone(), &[1.0]).unwrap();
        assert_eq!(t.stats(&k).unwrap().m2, 0.5);
        t.observe(k.clone(), &[1.0]).unwrap();
        t.observe(k.clone(), &[0.0]).unwrap();
        assert_eq!(t.average(&k), vec![0.5]);
        assert!((t.stats(&k).unwrap().m2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn averages() {
        let mut t = BinTable::new(vec![0.5]);
        let k = BinKey::label("x");
        assert_eq!(t.average(&k), vec![0.5]);
        for v in [1.0, 0.0, 1.0] {
            t.observe(k.clone(), &[v]).unwrap();
        }
        assert!((t.average(&k)[0] - 2.0 / 3.0).abs() < 1e-15);

        let mut log = BinTable::regularized(vec![0.5, 0.5]);
        assert_eq!(log.average(&k), vec![0.5, 0.5]);
        log.observe(k.clone(), &[1.0, 0.0]).unwrap();
        assert_eq!(log.average(&k), vec![0.75, 0.25]);
    }

    #[test]
    fn repeated_value_round_trips_exactly() {
        let mut t = BinTable::new(vec![0.0]);
        for _ in 0..7 {
            t.observe(BinKey::Index(1), &[0.1]).unwrap();
        }
        assert_eq!(t.average(&BinKey::Index(1)), vec![0.1]);
    }

    #[test]
    fn weighted_updates() {
        let mut t = BinTable::new(vec![0.0]);
        for (i, v) in [0.0, 1.0].iter().enumerate() {
            for bin in 0..2 {
                t.observe_weighted(BinKey::Index(bin), &[*v], 0.5).unwrap();
            }
            assert_eq!(t.total_weight(), (i + 1) as f64);
        }
        for bin in 0..2 {
            let s = t.stats(&BinKey::Index(bin)).unwrap();
            assert_eq!(s.mean, vec![0.5]);
            assert!((s.m2 - 0.25).abs() < 1e-15);
            assert!((s.m2 - offline_m2(&[(vec![0.0], 0.5), (vec![1.0], 0.5)])).abs() < 1e-15);
        }
        let before = t.stats(&BinKey::Index(0)).cloned();
        t.observe_weighted(BinKey::Index(0), &[0.9], 0.0).unwrap();
        assert_eq!(t.stats(&BinKey::Index(0)).cloned(), before);
        assert!(t.observe_weighted(BinKey::Index(0), &[0.9], 1.5).is_err());
        assert_eq!(t.observe(BinKey::Index(0), &[f64::NAN]), Err(BinningError::NonFinite));
    }

    #[test]
    fn joint_keys() {
        let a = BinKey::label("b");
        let j1 = joint_key(&[a.clone(), BinKey::Lattice(vec![1])]);
        let j2 = joint_key(&[a.clone(), BinKey::Lattice(vec![2])]);
        assert_ne!(j1, j2);
        assert_eq!(joint_key(&[BinKey::label("rain-likely")]), BinKey::Joint(vec![BinKey::label("rain-likely")]));
        let (x, y, z) = (BinKey::Index(1), BinKey::Index(2), BinKey::Index(3));
        let nested = joint_key(&[joint_key(&[x.clone(), y.clone()]), z.clone()]);
        assert_eq!(nested, joint_key(&[x, y, z]));
    }

    #[test]
    fn coarsening() {
        let mut coarse = BinTable::new(vec![0.5]);
        let mut fine = BinTable::new(vec![0.5]);
        for v in [0.0, 1.0, 0.0, 1.0] {
            coarse.observe(BinKey::Index(0), &[v]).unwrap();
            fine.observe(BinKey::Index(v as usize), &[v]).unwrap();
        }
        let chk = refinement_of(&fine, &coarse, |_| BinKey::Index(0)).unwrap();
        assert!(chk.is_coarsening);
        assert_eq!(chk.r_fine, 0.0);
        assert_eq!(chk.r_coarse, 0.25);
        let same = refinement_of(&coarse, &coarse, |k| k.clone()).unwrap();
        assert!(same.is_coarsening && same.r_fine == same.r_coarse);
        let wrong = refinement_of(&fine, &coarse, |k| k.clone()).unwrap();
        assert!(!wrong.is_coarsening);

        let mut short = BinTable::new(vec![0.5]);
        short.observe(BinKey::Index(0), &[1.0]).unwrap();
        assert!(matches!(refinement_of(&fine, &short, |k| k.clone()), Err(BinningError::MismatchedTotals { .. })));
    }

    #[test]
    fn hats_partition_unity() {
        let pi = FractionalBinning::uniform_hats(10).unwrap();
        for k in 0..=1000 {
            let c = k as f64 / 1000.0;
            let s: f64 = pi.weights(&[c]).iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let w = FractionalBinning::hats(vec![0.0, 1.0]).unwrap().weights(&[0.25]);
        assert_eq!(w, vec![(BinKey::Lattice(vec![0]), 0.75), (BinKey::Lattice(vec![1]), 0.25)]);
        let w2 = FractionalBinning::uniform_hats(2).unwrap().weights(&[0.25, 0.5]);
        assert_eq!(w2.len(), 2);
        assert!((w2.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(FractionalBinning::hats(vec![0.0, 0.0]).is_err());
        assert_eq!(FractionalBinning::single().weights(&[0.3]), vec![(BinKey::Index(0), 1.0)]);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::geometry::dist;
    use proptest::prelude::*;

    fn points(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.0..1.0f64, dim), 1..200)
    }

    fn offline_m2(xs: &[Vec<f64>], ws: &[f64]) -> f64 {
        let total: f64 = ws.iter().sum();
        let dim = xs[0].len();
        let mean: Vec<f64> =
            (0..dim).map(|d| xs.iter().zip(ws).map(|(x, w)| w * x[d]).sum::<f64>() / total).collect();
        xs.iter().zip(ws).map(|(x, w)| w * dist2(x, &mean)).sum()
    }

    proptest! {
        #[test]
        fn welford_matches_offline(xs in points(2)) {
            let mut t = BinTable::new(vec![0.5, 0.5]);
            for x in &xs {
                t.observe(BinKey::Index(0), x).unwrap();
            }
            let s = t.stats(&BinKey::Index(0)).unwrap();
            let exact = offline_m2(&xs, &vec![1.0; xs.len()]);
            prop_assert!((s.m2 - exact).abs() <= 1e-10 * exact.max(1.0));
        }

        #[test]
        fn weighted_welford_matches_offline(
            pairs in prop::collection::vec((prop::collection::vec(0.0..1.0f64, 3), 0.01..1.0f64), 1..200)
        ) {
            let mut t = BinTable::new(vec![0.0; 3]);
            for (x, w) in &pairs {
                t.observe_weighted(BinKey::Index(0), x, *w).unwrap();
            }
            let (xs, ws): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let s = t.stats(&BinKey::Index(0)).unwrap();
            let exact = offline_m2(&xs, &ws);
            prop_assert!((s.m2 - exact).abs() <= 1e-10 * exact.max(1.0));
        }

        #[test]
        fn online_variance_gap(xs in points(1)) {
            // first point seeds the prior so only within-sample distances matter
            let mut t = BinTable::new(xs[0].clone());
            for x in &xs {
                t.observe(BinKey::Index(0), x).unwrap();
            }
            let n = xs.len() as f64;
            let s = t.stats(&BinKey::Index(0)).unwrap();
            let xi = xs.iter().flat_map(|a| xs.iter().map(move |b| dist(a, b))).fold(0.0, f64::max);
            let gap = (s.online_sq_sum - s.m2) / n;
            prop_assert!(gap >= -1e-12);
            prop_assert!(gap <= xi * xi * (n.ln() + 1.0) / n + 1e-12);
        }

        #[test]
        fn identical_observations_round_trip(v in -5.0..5.0f64, k in 1usize..300) {
            let mut t = BinTable::new(vec![0.0]);
            for _ in 0..k {
                t.observe(BinKey::Index(0), &[v]).unwrap();
            }
            prop_assert_eq!(t.average(&BinKey::Index(0)), vec![v]);
        }

        #[test]
        fn refining_never_increases_refinement(
            stream in prop::collection::vec((0usize..6, 0.0..1.0f64), 1..300),
            merge in 1usize..4,
        ) {
            let mut fine = BinTable::new(vec![0.5]);
            let mut coarse = BinTable::new(vec![0.5]);
            let phi = |k: &BinKey| match k {
                BinKey::Index(i) => BinKey::Index(i / merge),
                other => other.clone(),
            };
            for (bin, x) in &stream {
                fine.observe(BinKey::Index(*bin), &[*x]).unwrap();
                coarse.observe(phi(&BinKey::Index(*bin)), &[*x]).unwrap();
            }
            let check = refinement_of(&fine, &coarse, phi).unwrap();
            prop_assert!(check.is_coarsening);
            prop_assert!(check.r_fine <= check.r_coarse + 1e-10);
        }

        #[test]
        fn hat_weights_partition_unity(c in prop::collection::vec(-0.2..1.2f64, 1..4), res in 1u32..12) {
            let pi = FractionalBinning::uniform_hats(res).unwrap();
            let w = pi.weights(&c);
            let total: f64 = w.iter().map(|(_, x)| x).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|(_, x)| (0.0..=1.0).contains(x)));
        }
    }
}
