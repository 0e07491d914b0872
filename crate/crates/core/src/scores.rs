//! Brier, calibration and refinement scores (quadratic and logarithmic),
//! offline and online.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::binning::{BinKey, BinTable, BinningError, FractionalBinning};
use crate::geometry::{cross_entropy, dist, dist2, entropy, kl_divergence, Point, Space};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("ledger is empty")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value")]
    NonFinite,
    #[error("bin key {key} already labels forecast {existing:?}, got {got:?}")]
    KeyMismatch { key: String, existing: Point, got: Point },
    #[error(transparent)]
    Binning(#[from] BinningError),
}

pub type Result<T> = std::result::Result<T, ScoreError>;

fn check(dim: usize, x: &[f64]) -> Result<()> {
    if x.len() != dim {
        return Err(ScoreError::DimensionMismatch { expected: dim, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ScoreError::NonFinite);
    }
    Ok(())
}

/// Per-step contributions returned by `record`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepDelta {
    pub sq_err: f64,
    pub online_ref_term: f64,
}

/// All quadratic scores at one time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Scores {
    pub t: usize,
    pub brier: f64,
    pub calibration_l2: f64,
    pub calibration_l1: f64,
    pub refinement: f64,
    pub online_refinement: f64,
}

/// Minimal Brier score over relabelings and the optimal relabeling.
#[derive(Clone, Debug, PartialEq)]
pub struct Relabeling {
    pub score: f64,
    pub relabeling: BTreeMap<BinKey, Point>,
}

/// Running tallies for one (action, forecast) stream, binned by forecast.
///
/// The caller supplies the bin key of each forecast; a key must always
/// denote the same forecast value.
#[derive(Clone, Debug)]
pub struct ScoreLedger {
    dim: usize,
    table: BinTable,
    labels: BTreeMap<BinKey, Point>,
    stream: Vec<(Point, Point, BinKey)>,
    brier_sum: f64,
    online_sum: f64,
    // incremental Σ n‖e‖², Σ n‖e‖, Σ m2 for cheap per-step traces
    k2_sum: f64,
    k1_sum: f64,
    m2_sum: f64,
}

impl ScoreLedger {
    /// Ledger whose empty bins use `prior` as `ā₀`.
    pub fn new(prior: Point) -> Self {
        Self {
            dim: prior.len(),
            table: BinTable::new(prior),
            labels: BTreeMap::new(),
            stream: Vec::new(),
            brier_sum: 0.0,
            online_sum: 0.0,
            k2_sum: 0.0,
            k1_sum: 0.0,
            m2_sum: 0.0,
        }
    }

    /// Ledger with the centroid of `C` as prior.
    pub fn for_space(space: &Space) -> Self {
        Self::new(space.centroid())
    }

    pub fn t(&self) -> usize {
        self.stream.len()
    }

    pub fn table(&self) -> &BinTable {
        &self.table
    }

    pub fn stream(&self) -> &[(Point, Point, BinKey)] {
        &self.stream
    }

    pub fn record(&mut self, a: &[f64], c: &[f64], key: BinKey) -> Result<StepDelta> {
        check(self.dim, a)?;
        check(self.dim, c)?;
        if let Some(existing) = self.labels.get(&key) {
            if existing.as_slice() != c {
                return Err(ScoreError::KeyMismatch { key: key.to_string(), existing: existing.clone(), got: c.to_vec() });
            }
        } else {
            self.labels.insert(key.clone(), c.to_vec());
        }
        let (old_k2, old_k1, old_m2) = self.bin_terms(&key, c);
        let sq_err = dist2(a, c);
        let receipt = self.table.observe(key.clone(), a)?;
        let online_ref_term = dist2(a, &receipt.prev_average);
        let (new_k2, new_k1, new_m2) = self.bin_terms(&key, c);
        self.k2_sum += new_k2 - old_k2;
        self.k1_sum += new_k1 - old_k1;
        self.m2_sum += new_m2 - old_m2;
        self.brier_sum += sq_err;
        self.online_sum += online_ref_term;
        self.stream.push((a.to_vec(), c.to_vec(), key));
        Ok(StepDelta { sq_err, online_ref_term })
    }

    fn bin_terms(&self, key: &BinKey, c: &[f64]) -> (f64, f64, f64) {
        match self.table.stats(key) {
            Some(s) => {
                let e = dist(&s.mean, c);
                (s.weight * e * e, s.weight * e, s.m2)
            }
            None => (0.0, 0.0, 0.0),
        }
    }

    fn nonempty(&self) -> Result<f64> {
        if self.stream.is_empty() {
            Err(ScoreError::Empty)
        } else {
            Ok(self.stream.len() as f64)
        }
    }

    /// `B_t = (1/t) Σ ‖a_s − c_s‖²`.
    pub fn brier(&self) -> Result<f64> {
        Ok(self.brier_sum / self.nonempty()?)
    }

    /// `K_t = Σ_x (n(x)/t) ‖ā(x) − x‖²`, recomputed from the bin table.
    pub fn calibration_l2(&self) -> Result<f64> {
        let t = self.nonempty()?;
        Ok(self.table.iter().map(|(k, s)| s.weight * dist2(&s.mean, &self.labels[k])).sum::<f64>() / t)
    }

    /// `Σ_x (n(x)/t) ‖ā(x) − x‖`.
    pub fn calibration_l1(&self) -> Result<f64> {
        let t = self.nonempty()?;
        Ok(self.table.iter().map(|(k, s)| s.weight * dist(&s.mean, &self.labels[k])).sum::<f64>() / t)
    }

    /// `R_t = Σ_x (n(x)/t) v(x)`.
    pub fn refinement(&self) -> Result<f64> {
        self.nonempty()?;
        Ok(self.table.refinement())
    }

    /// `R̃_t = (1/t) Σ ‖a_s − ā_{s−1}(c_s)‖²`.
    pub fn online_refinement(&self) -> Result<f64> {
        Ok(self.online_sum / self.nonempty()?)
    }

    /// Number of distinct forecasts so far (`N_t`).
    pub fn n_distinct(&self) -> usize {
        self.table.len()
    }

    /// Scores from the running sums (O(1)); used for per-step traces.
    pub fn running(&self) -> Result<Scores> {
        let t = self.nonempty()?;
        Ok(Scores {
            t: self.stream.len(),
            brier: self.brier_sum / t,
            calibration_l2: self.k2_sum.max(0.0) / t,
            calibration_l1: self.k1_sum.max(0.0) / t,
            refinement: self.m2_sum.max(0.0) / t,
            online_refinement: self.online_sum / t,
        })
    }

    /// Scores recomputed from the bin table.
    pub fn scores(&self) -> Result<Scores> {
        Ok(Scores {
            t: self.nonempty()? as usize,
            brier: self.brier()?,
            calibration_l2: self.calibration_l2()?,
            calibration_l1: self.calibration_l1()?,
            refinement: self.refinement()?,
            online_refinement: self.online_refinement()?,
        })
    }

    /// Relabel every bin by its average action and report the Brier score of
    /// the relabeled stream, evaluated directly on the stored stream.
    pub fn relabel_min_brier(&self) -> Result<Relabeling> {
        let t = self.nonempty()?;
        let relabeling: BTreeMap<BinKey, Point> = self.table.iter().map(|(k, s)| (k.clone(), s.mean.clone())).collect();
        let score = self.stream.iter().map(|(a, _, k)| dist2(a, &relabeling[k])).sum::<f64>() / t;
        Ok(Relabeling { score, relabeling })
    }

    /// Brier score of the stream after relabeling bins by `phi` (bins
    /// missing from `phi` keep their forecast).
    pub fn brier_relabeled(&self, phi: &BTreeMap<BinKey, Point>) -> Result<f64> {
        let t = self.nonempty()?;
        Ok(self
            .stream
            .iter()
            .map(|(a, c, k)| dist2(a, phi.get(k).unwrap_or(c)))
            .sum::<f64>()
            / t)
    }
}

/// Logarithmic scores at one time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogScores {
    pub t: usize,
    #[serde(rename = "L")]
    pub log_score: f64,
    #[serde(rename = "R_log")]
    pub refinement: f64,
    #[serde(rename = "K_log")]
    pub calibration: f64,
    #[serde(rename = "H")]
    pub entropy: f64,
    #[serde(rename = "online_R_log")]
    pub online_refinement: f64,
}

/// Log-score tallies on the simplex. Bins carry the `g₀ = (1/m,…,1/m)`
/// pseudo-observation for the online score; offline scores use raw means.
/// Infinite scores are represented as `f64::INFINITY`.
#[derive(Clone, Debug)]
pub struct LogScoreLedger {
    dim: usize,
    table: BinTable,
    labels: BTreeMap<BinKey, Point>,
    t: usize,
    kl_sum: f64,
    entropy_sum: f64,
    online_sum: f64,
    // incremental Σ n H(ā) and Σ n D(ā‖x)
    r_acc: f64,
    k_acc: f64,
}

impl LogScoreLedger {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: BinTable::regularized(vec![1.0 / dim as f64; dim]),
            labels: BTreeMap::new(),
            t: 0,
            kl_sum: 0.0,
            entropy_sum: 0.0,
            online_sum: 0.0,
            r_acc: 0.0,
            k_acc: 0.0,
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn table(&self) -> &BinTable {
        &self.table
    }

    /// Records one period and returns `(D(a‖c), D(a‖ā′_{s−1}(c)))`.
    pub fn record(&mut self, a: &[f64], c: &[f64], key: BinKey) -> Result<(f64, f64)> {
        check(self.dim, a)?;
        check(self.dim, c)?;
        if let Some(existing) = self.labels.get(&key) {
            if existing.as_slice() != c {
                return Err(ScoreError::KeyMismatch { key: key.to_string(), existing: existing.clone(), got: c.to_vec() });
            }
        } else {
            self.labels.insert(key.clone(), c.to_vec());
        }
        let kl = kl_divergence(a, c);
        let (old_r, old_k) = self.bin_terms(&key, c);
        let receipt = self.table.observe(key.clone(), a)?;
        let online = kl_divergence(a, &receipt.prev_average);
        let (new_r, new_k) = self.bin_terms(&key, c);
        self.r_acc += new_r - old_r;
        self.k_acc += new_k - old_k;
        self.kl_sum += kl;
        self.entropy_sum += entropy(a);
        self.online_sum += online;
        self.t += 1;
        Ok((kl, online))
    }

    fn bin_terms(&self, key: &BinKey, c: &[f64]) -> (f64, f64) {
        match self.table.stats(key) {
            Some(s) => (s.weight * entropy(&s.mean), s.weight * kl_divergence(&s.mean, c)),
            None => (0.0, 0.0),
        }
    }

    /// Scores from incremental sums (O(1)); agree with [`Self::scores`] up to
    /// rounding while all terms are finite.
    pub fn running(&self) -> Result<LogScores> {
        if self.t == 0 {
            return Err(ScoreError::Empty);
        }
        let t = self.t as f64;
        let h = self.entropy_sum / t;
        Ok(LogScores {
            t: self.t,
            log_score: self.kl_sum / t,
            refinement: self.r_acc / t - h,
            calibration: if self.k_acc.is_nan() { f64::INFINITY } else { self.k_acc.max(0.0) / t },
            entropy: h,
            online_refinement: self.online_sum / t,
        })
    }

    pub fn scores(&self) -> Result<LogScores> {
        if self.t == 0 {
            return Err(ScoreError::Empty);
        }
        let t = self.t as f64;
        let h = self.entropy_sum / t;
        let mut r = 0.0;
        let mut k = 0.0;
        for (key, s) in self.table.iter() {
            r += s.weight * entropy(&s.mean);
            k += s.weight * kl_divergence(&s.mean, &self.labels[key]);
        }
        Ok(LogScores {
            t: self.t,
            log_score: self.kl_sum / t,
            refinement: r / t - h,
            calibration: k / t,
            entropy: h,
            online_refinement: self.online_sum / t,
        })
    }

    /// `L_t` evaluated through bins: `Σ (n/t) L(ā(x), x) − H_t`.
    pub fn log_score_by_bins(&self) -> Result<f64> {
        if self.t == 0 {
            return Err(ScoreError::Empty);
        }
        let t = self.t as f64;
        let s: f64 = self.table.iter().map(|(k, s)| s.weight * cross_entropy(&s.mean, &self.labels[k])).sum();
        Ok(s / t - self.entropy_sum / t)
    }
}

/// Scores of a stream with respect to a side binning `b` refined by a
/// fractional binning `Π` of the forecasts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FractionalScores {
    pub t: usize,
    pub brier: f64,
    pub k_joint: f64,
    pub r_joint: f64,
    pub online_r_joint: f64,
}

/// Ledger for `(b, i)` bins fed with `z = a − c` at weight `w_i(c)`.
#[derive(Clone, Debug)]
pub struct FractionalLedger {
    dim: usize,
    binning: FractionalBinning,
    table: BinTable,
    t: usize,
    brier_sum: f64,
    online_sum: f64,
}

/// Key of the `(b, i)` bin.
pub fn fractional_key(b: &BinKey, i: &BinKey) -> BinKey {
    BinKey::Joint(vec![b.clone(), i.clone()])
}

impl FractionalLedger {
    pub fn new(dim: usize, binning: FractionalBinning) -> Self {
        Self { dim, binning, table: BinTable::new(vec![0.0; dim]), t: 0, brier_sum: 0.0, online_sum: 0.0 }
    }

    pub fn binning(&self) -> &FractionalBinning {
        &self.binning
    }

    pub fn table(&self) -> &BinTable {
        &self.table
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// `e_t(b, i)`, zero for an empty bin.
    pub fn e(&self, b: &BinKey, i: &BinKey) -> Point {
        self.table.average(&fractional_key(b, i))
    }

    pub fn record(&mut self, a: &[f64], c: &[f64], b: &BinKey) -> Result<StepDelta> {
        check(self.dim, a)?;
        check(self.dim, c)?;
        let z: Point = a.iter().zip(c).map(|(x, y)| x - y).collect();
        let mut online = 0.0;
        for (i, lambda) in self.binning.weights(c) {
            let receipt = self.table.observe_weighted(fractional_key(b, &i), &z, lambda)?;
            online += lambda * dist2(&z, &receipt.prev_average);
        }
        let sq_err = dist2(a, c);
        self.brier_sum += sq_err;
        self.online_sum += online;
        self.t += 1;
        Ok(StepDelta { sq_err, online_ref_term: online })
    }

    pub fn scores(&self) -> Result<FractionalScores> {
        if self.t == 0 {
            return Err(ScoreError::Empty);
        }
        let t = self.t as f64;
        let mut k = 0.0;
        let mut r = 0.0;
        for (_, s) in self.table.iter() {
            k += s.weight * s.mean.iter().map(|v| v * v).sum::<f64>();
            r += s.m2;
        }
        Ok(FractionalScores {
            t: self.t,
            brier: self.brier_sum / t,
            k_joint: k / t,
            r_joint: r / t,
            online_r_joint: self.online_sum / t,
        })
    }
}

/// Online refinement gap bound `γ² (N/t)(ln(t/N) + 1)`.
pub fn online_gap_bound(gamma: f64, n_distinct: usize, t: usize) -> f64 {
    if n_distinct == 0 || t == 0 {
        return 0.0;
    }
    let (n, t) = (n_distinct as f64, t as f64);
    gamma * gamma * (n / t) * ((t / n).ln() + 1.0)
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::binning::FractionalBinning;
    use proptest::prelude::*;

    /// Actions in `{0,1}^m`, forecasts from a small lattice so bins repeat.
    fn stream(m: usize) -> impl Strategy<Value = Vec<(Vec<f64>, Vec<f64>)>> {
        prop::collection::vec(
            (prop::collection::vec(0u8..2, m), prop::collection::vec(0u8..5, m)).prop_map(|(a, c)| {
                (a.iter().map(|&v| v as f64).collect(), c.iter().map(|&v| v as f64 / 4.0).collect())
            }),
            1..300,
        )
    }

    fn ledger(s: &[(Vec<f64>, Vec<f64>)]) -> ScoreLedger {
        let m = s[0].0.len();
        let mut l = ScoreLedger::new(vec![0.5; m]);
        for (a, c) in s {
            l.record(a, c, BinKey::exact(c)).unwrap();
        }
        l
    }

    proptest! {
        #[test]
        fn decomposition_and_sandwiches(m in 1usize..4, seed_stream in stream(3)) {
            let s: Vec<_> = seed_stream.iter().map(|(a, c)| (a[..m].to_vec(), c[..m].to_vec())).collect();
            let l = ledger(&s);
            let sc = l.scores().unwrap();
            let gamma = (m as f64).sqrt();
            prop_assert!((sc.brier - sc.refinement - sc.calibration_l2).abs() <= 1e-12);
            prop_assert!(sc.calibration_l1.powi(2) <= sc.calibration_l2 + 1e-12);
            prop_assert!(sc.calibration_l2 <= gamma * sc.calibration_l1 + 1e-12);
            prop_assert!(sc.refinement <= sc.online_refinement + 1e-12);
            let gap = online_gap_bound(gamma, l.n_distinct(), sc.t);
            prop_assert!(sc.online_refinement <= sc.refinement + gap + 1e-12);
            let run = l.running().unwrap();
            prop_assert!((run.brier - sc.brier).abs() < 1e-12);
            prop_assert!((run.calibration_l2 - sc.calibration_l2).abs() < 1e-10);
            prop_assert!((run.calibration_l1 - sc.calibration_l1).abs() < 1e-10);
            prop_assert!((run.refinement - sc.refinement).abs() < 1e-10);
        }

        #[test]
        fn relabeling_minimizes_brier(s in stream(1), shifts in prop::collection::vec(-0.3..0.3f64, 5)) {
            let l = ledger(&s);
            let best = l.relabel_min_brier().unwrap();
            prop_assert!((best.score - l.refinement().unwrap()).abs() < 1e-12);
            let phi: BTreeMap<BinKey, Point> = best
                .relabeling
                .iter()
                .enumerate()
                .map(|(i, (k, v))| (k.clone(), vec![v[0] + shifts[i % shifts.len()]]))
                .collect();
            prop_assert!(best.score <= l.brier_relabeled(&phi).unwrap() + 1e-12);
        }

        #[test]
        fn log_decomposition(
            pairs in prop::collection::vec((0usize..3, 1u8..4, 1u8..4), 1..200)
        ) {
            let mut l = LogScoreLedger::new(3);
            for (a, x, y) in &pairs {
                let mut av = vec![0.0; 3];
                av[*a] = 1.0;
                let (x, y) = (*x as f64, *y as f64);
                let c = vec![x / 10.0, y / 10.0, 1.0 - (x + y) / 10.0];
                l.record(&av, &c, BinKey::exact(&c)).unwrap();
            }
            let s = l.scores().unwrap();
            prop_assert!((s.log_score - s.refinement - s.calibration).abs() <= 1e-10);
            prop_assert!((l.log_score_by_bins().unwrap() - s.log_score).abs() <= 1e-10);
            let r = l.running().unwrap();
            prop_assert!((r.refinement - s.refinement).abs() <= 1e-10);
            prop_assert!((r.calibration - s.calibration).abs() <= 1e-10);
        }

        #[test]
        fn fractional_decomposition(
            s in stream(1),
            bs in prop::collection::vec(0usize..3, 300),
            res in 1u32..8,
        ) {
            let mut l = FractionalLedger::new(1, FractionalBinning::uniform_hats(res).unwrap());
            for (i, (a, c)) in s.iter().enumerate() {
                l.record(a, c, &BinKey::Index(bs[i])).unwrap();
            }
            let f = l.scores().unwrap();
            prop_assert!((f.brier - f.r_joint - f.k_joint).abs() <= 1e-10);
            prop_assert!(f.r_joint <= f.online_r_joint + 1e-12);
        }
    }
}
