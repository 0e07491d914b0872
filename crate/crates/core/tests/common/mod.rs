#![allow(dead_code)]

use std::collections::BTreeMap;

use calibeat::adversaries::{ActionSource, SideSource, SourceMode};
use calibeat::{BinKey, Forecaster};
use nalgebra::{DMatrix, DVector};

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Value of a zero-sum game (rows maximize) by enumerating equal-size
/// supports and solving the indifference equations.
pub fn support_enumeration_value(a: &[Vec<f64>]) -> f64 {
    let (r, c) = (a.len(), a[0].len());
    let subsets = |n: usize, k: usize| -> Vec<Vec<usize>> {
        (0u32..1 << n).filter(|m| m.count_ones() as usize == k).map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect()).collect()
    };
    for k in 1..=r.min(c) {
        for rows in subsets(r, k) {
            for cols in subsets(c, k) {
                // unknowns (p over rows, v): sum_i p_i a_ij = v for j in cols, sum p = 1
                let mut m = DMatrix::zeros(k + 1, k + 1);
                let mut rhs = DVector::zeros(k + 1);
                for (e, &j) in cols.iter().enumerate() {
                    for (d, &i) in rows.iter().enumerate() {
                        m[(e, d)] = a[i][j];
                    }
                    m[(e, k)] = -1.0;
                }
                for d in 0..k {
                    m[(k, d)] = 1.0;
                }
                rhs[k] = 1.0;
                let Some(sol_p) = m.clone().lu().solve(&rhs) else { continue };
                // unknowns (q over cols, v): sum_j a_ij q_j = v for i in rows
                let mut n = DMatrix::zeros(k + 1, k + 1);
                for (d, &i) in rows.iter().enumerate() {
                    for (e, &j) in cols.iter().enumerate() {
                        n[(d, e)] = a[i][j];
                    }
                    n[(d, k)] = -1.0;
                }
                for e in 0..k {
                    n[(k, e)] = 1.0;
                }
                let Some(sol_q) = n.lu().solve(&rhs) else { continue };
                let eps = 1e-9;
                if sol_p.iter().take(k).any(|&x| x < -eps) || sol_q.iter().take(k).any(|&x| x < -eps) {
                    continue;
                }
                let mut p = vec![0.0; r];
                let mut q = vec![0.0; c];
                for (d, &i) in rows.iter().enumerate() {
                    p[i] = sol_p[d];
                }
                for (e, &j) in cols.iter().enumerate() {
                    q[j] = sol_q[e];
                }
                let secured = (0..c).map(|j| (0..r).map(|i| p[i] * a[i][j]).sum::<f64>()).fold(f64::INFINITY, f64::min);
                let conceded =
                    (0..r).map(|i| (0..c).map(|j| a[i][j] * q[j]).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max);
                if conceded - secured <= 1e-9 {
                    return 0.5 * (secured + conceded);
                }
            }
        }
    }
    panic!("no equal-support equilibrium (degenerate game)")
}

/// Per-bin sums for refinement scores, independent of the library tables.
#[derive(Clone, Debug, Default)]
pub struct Tally {
    bins: BTreeMap<BinKey, (f64, Vec<f64>, f64)>,
    pub t: f64,
}

impl Tally {
    pub fn observe(&mut self, key: BinKey, a: &[f64]) {
        let e = self.bins.entry(key).or_insert_with(|| (0.0, vec![0.0; a.len()], 0.0));
        e.0 += 1.0;
        for (s, x) in e.1.iter_mut().zip(a) {
            *s += x;
        }
        e.2 += a.iter().map(|x| x * x).sum::<f64>();
        self.t += 1.0;
    }

    /// Average of bin `key`, or `prior` if it is empty.
    pub fn average(&self, key: &BinKey, prior: &[f64]) -> Vec<f64> {
        match self.bins.get(key) {
            Some((n, s, _)) => s.iter().map(|x| x / n).collect(),
            None => prior.to_vec(),
        }
    }

    pub fn bins(&self) -> usize {
        self.bins.len()
    }

    pub fn refinement(&self) -> f64 {
        self.bins.values().map(|(n, s, q)| q - s.iter().map(|x| x * x).sum::<f64>() / n).sum::<f64>().max(0.0) / self.t
    }
}

/// One period of a driven run.
pub struct Step<'a> {
    pub t: usize,
    pub a: &'a [f64],
    pub c: &'a [f64],
    pub brier: f64,
    /// Refinement of each side forecast and of their join.
    pub r_side: Vec<f64>,
    pub bins_side: Vec<usize>,
    pub r_joint: f64,
    pub joint_bins: usize,
    /// `ā^n_{t−1}(b^n_t)` for each side forecast.
    pub side_avg_before: Vec<Vec<f64>>,
}

/// Runs `f` for `t` periods, computing Brier and side refinements from
/// scratch, and hands each period to `visit`.
pub fn drive<F: Forecaster>(
    f: &mut F,
    source: &mut dyn ActionSource,
    sides: &mut [SideSource],
    prior: &[f64],
    t: usize,
    mut visit: impl FnMut(&Step, &F),
) {
    let n = sides.len();
    let mut tallies = vec![Tally::default(); n];
    let mut joint = Tally::default();
    let mut sq_sum = 0.0;
    for step in 1..=t {
        let keys: Vec<BinKey> = sides.iter_mut().map(|s| s.next_key(step)).collect();
        let d = f.next(&keys).unwrap();
        let a = match source.mode() {
            SourceMode::Adaptive => source.next_action(Some(&d.visible())).unwrap(),
            SourceMode::Oblivious => source.next_action(None).unwrap(),
        };
        f.update(&a).unwrap();
        sq_sum += sq(&a, &d.forecast);
        let before: Vec<Vec<f64>> = tallies.iter().zip(&keys).map(|(tl, k)| tl.average(k, prior)).collect();
        for (tl, k) in tallies.iter_mut().zip(&keys) {
            tl.observe(k.clone(), &a);
        }
        joint.observe(BinKey::Label(format!("{keys:?}")), &a);
        let s = Step {
            t: step,
            a: &a,
            c: &d.forecast,
            brier: sq_sum / step as f64,
            r_side: tallies.iter().map(Tally::refinement).collect(),
            bins_side: tallies.iter().map(Tally::bins).collect(),
            r_joint: joint.refinement(),
            joint_bins: joint.bins(),
            side_avg_before: before,
        };
        visit(&s, f);
    }
}

/// Mean and standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}
