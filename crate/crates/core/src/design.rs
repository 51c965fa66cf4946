//! Saturation designs, stratum-count allocation and sample-size planning.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{uniform_regret_cmes, NoisePrecision};
use crate::error::{Error, Result};
use crate::model::{RatioSet, RuleGrid, StratumCounts, Treatment, PROB_TOL};

/// Number of deterministic starting points used by [`optimize_saturation`].
pub const SATURATION_STARTS: usize = 16;

const START_SEED: u64 = 0x5a7_u64;
const MAX_SWEEPS: usize = 500;
const GOLDEN_ITERS: usize = 80;
// Masses are kept strictly positive so that every precision stays finite.
const MIN_MASS: f64 = 1e-9;

/// Distribution of clusters over candidate ratios plus the total sample size.
///
/// The first ratio carries the smallest mass; its precision is the
/// reference term in the design objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationDesign {
    pub ratios: RatioSet,
    pub alphas: Vec<f64>,
    pub total: u64,
    /// Index of the constrained (smallest-mass) ratio.
    pub reference: usize,
    pub objective: f64,
}

impl SaturationDesign {
    /// `A_k = 1 / (α_k N)`.
    pub fn precisions(&self) -> Result<NoisePrecision> {
        NoisePrecision::scalar(self.alphas.iter().map(|a| 1.0 / (a * self.total as f64)).collect())
    }
}

/// `Σ_{k≥1} √(1/(α_0 N) + 1/(α_k N))`.
pub fn saturation_objective(alphas: &[f64], total: u64) -> f64 {
    let n = total as f64;
    let a0 = 1.0 / (alphas[0] * n);
    alphas[1..].iter().map(|&a| (a0 + 1.0 / (a * n)).sqrt()).sum()
}

fn feasible(alphas: &[f64]) -> bool {
    alphas[0] >= MIN_MASS && alphas[1..].iter().all(|&a| a >= alphas[0])
}

/// Range of `t` keeping `alphas` feasible after moving mass `t` from `j` to `i`.
fn transfer_range(alphas: &[f64], i: usize, j: usize) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    // Each constraint is c + b t >= 0.
    let mut clamp = |c: f64, b: f64| {
        if b > 0.0 {
            lo = lo.max(-c / b);
        } else if b < 0.0 {
            hi = hi.min(-c / b);
        }
    };
    let coef = |m: usize| -> f64 {
        if m == i {
            1.0
        } else if m == j {
            -1.0
        } else {
            0.0
        }
    };
    clamp(alphas[0] - MIN_MASS, coef(0));
    for k in 1..alphas.len() {
        clamp(alphas[k] - alphas[0], coef(k) - coef(0));
    }
    (lo.min(0.0), hi.max(0.0))
}

fn shifted(alphas: &[f64], i: usize, j: usize, t: f64) -> Vec<f64> {
    let mut out = alphas.to_vec();
    out[i] += t;
    out[j] -= t;
    out
}

fn golden_section(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..GOLDEN_ITERS {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        x1
    } else {
        x2
    }
}

/// Pairwise mass-transfer descent; only strict improvements are accepted.
fn descend(mut alphas: Vec<f64>, total: u64) -> (Vec<f64>, f64) {
    let k = alphas.len();
    let mut best = saturation_objective(&alphas, total);
    for _ in 0..MAX_SWEEPS {
        let mut improved = false;
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let (lo, hi) = transfer_range(&alphas, i, j);
                if hi - lo <= 0.0 {
                    continue;
                }
                let t = golden_section(lo, hi, |t| {
                    let cand = shifted(&alphas, i, j, t);
                    if feasible(&cand) {
                        saturation_objective(&cand, total)
                    } else {
                        f64::INFINITY
                    }
                });
                let cand = shifted(&alphas, i, j, t);
                if feasible(&cand) {
                    let v = saturation_objective(&cand, total);
                    // Ignore moves that only win by rounding noise.
                    if v < best * (1.0 - 1e-14) {
                        alphas = cand;
                        best = v;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    (alphas, best)
}

fn starting_points(k: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut starts = vec![vec![1.0 / k as f64; k]];
    while starts.len() < SATURATION_STARTS {
        let mut v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        // Move the smallest mass into the constrained slot.
        let m = (0..k).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap_or(0);
        v.swap(0, m);
        starts.push(v);
    }
    starts
}

/// Minimizes the saturation objective over the simplex subject to the first
/// ratio holding the smallest mass.
///
/// Runs [`SATURATION_STARTS`] deterministic starts, the first of which is the
/// uniform design, and keeps the lowest-index start whose objective is within
/// `1e-12` (relative) of the best.
pub fn optimize_saturation(ratios: &RatioSet, total: u64) -> Result<SaturationDesign> {
    let k = ratios.len();
    if total < k as u64 {
        return Err(Error::Infeasible(format!("sample size {total} is below the {k} candidate ratios")));
    }
    if k == 1 {
        return Ok(SaturationDesign {
            ratios: ratios.clone(),
            alphas: vec![1.0],
            total,
            reference: 0,
            objective: 0.0,
        });
    }
    let results: Vec<(Vec<f64>, f64)> = starting_points(k)
        .into_par_iter()
        .map(|s| descend(s, total))
        .collect();
    let min = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let (alphas, objective) = results
        .into_iter()
        .find(|r| r.1 <= min + 1e-12 * min.abs())
        .expect("at least one start");
    Ok(SaturationDesign {
        ratios: ratios.clone(),
        alphas,
        total,
        reference: 0,
        objective,
    })
}

/// Explicit stratum counts keyed by total sample size.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CountTable {
    pub rows: BTreeMap<u64, StratumCounts>,
}

impl CountTable {
    pub fn insert(&mut self, n: u64, counts: StratumCounts) -> Result<()> {
        if counts.total() != n {
            return Err(Error::invalid(format!("counts for N={n} sum to {}", counts.total())));
        }
        self.rows.insert(n, counts);
        Ok(())
    }
}

/// How a total sample size is turned into stratum counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationPolicy {
    /// Stored counts, returned verbatim.
    Explicit(CountTable),
    /// Stratum shares `α_k p_l w_t(π_kl)` rounded by largest remainder, with
    /// at least one person in every stratum that carries welfare weight.
    Proportional { alphas: Vec<f64> },
}

impl AllocationPolicy {
    /// Total sizes this policy is scanned over, from `1` up to `n_max`.
    pub fn sequence(&self, n_max: u64) -> Vec<u64> {
        match self {
            AllocationPolicy::Explicit(t) => t.rows.keys().copied().filter(|&n| n <= n_max).collect(),
            AllocationPolicy::Proportional { .. } => (1..=n_max).collect(),
        }
    }
}

fn proportional_counts(total: u64, alphas: &[f64], grid: &RuleGrid) -> Result<StratumCounts> {
    if alphas.len() != grid.len() {
        return Err(Error::invalid(format!(
            "{} design masses for {} rules",
            alphas.len(),
            grid.len()
        )));
    }
    if alphas.iter().any(|&a| !(a >= 0.0)) || (alphas.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
        return Err(Error::invalid("design masses must be nonnegative and sum to 1"));
    }
    let probs = grid.profile().probs();
    // (arm, cell, treatment, quota)
    let mut strata = Vec::new();
    for (k, rule) in grid.rules().iter().enumerate() {
        for (l, &r) in rule.iter().enumerate() {
            for t in Treatment::BOTH {
                let w = t.weight(r);
                if w > 0.0 {
                    strata.push((k, l, t, alphas[k] * probs[l] * w * total as f64));
                }
            }
        }
    }
    if (total as usize) < strata.len() {
        return Err(Error::Infeasible(format!(
            "N={total} cannot fill {} required strata",
            strata.len()
        )));
    }
    let mut n: Vec<u64> = strata.iter().map(|s| (s.3.floor() as u64).max(1)).collect();
    let mut assigned: u64 = n.iter().sum();
    let mut order: Vec<usize> = (0..strata.len()).collect();
    while assigned < total {
        order.sort_by(|&a, &b| {
            let ra = strata[a].3 - n[a] as f64;
            let rb = strata[b].3 - n[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        n[order[0]] += 1;
        assigned += 1;
    }
    while assigned > total {
        order.sort_by(|&a, &b| {
            let ra = strata[a].3 - n[a] as f64;
            let rb = strata[b].3 - n[b] as f64;
            ra.total_cmp(&rb).then(a.cmp(&b))
        });
        let Some(&i) = order.iter().find(|&&i| n[i] > 1) else {
            return Err(Error::Infeasible(format!("N={total} is too small")));
        };
        n[i] -= 1;
        assigned -= 1;
    }
    let mut counts = StratumCounts::new(vec![vec![[0, 0]; grid.cells()]; grid.len()])?;
    for (s, &c) in strata.iter().zip(&n) {
        counts.set(s.0, s.1, s.2, c);
    }
    Ok(counts)
}

/// Stratum counts for total size `total` under `policy`.
pub fn allocate_counts(total: u64, policy: &AllocationPolicy, grid: &RuleGrid) -> Result<StratumCounts> {
    let counts = match policy {
        AllocationPolicy::Explicit(table) => table
            .rows
            .get(&total)
            .cloned()
            .ok_or_else(|| Error::Infeasible(format!("no stored counts for N={total}")))?,
        AllocationPolicy::Proportional { alphas } => proportional_counts(total, alphas, grid)?,
    };
    counts.validate(grid)?;
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeStep {
    pub total: u64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeResult {
    pub threshold: f64,
    /// Smallest qualifying size, if any.
    pub total: Option<u64>,
    /// Uniform regret bound at every feasible size scanned, up to and
    /// including the answer.
    pub trace: Vec<SampleSizeStep>,
}

/// Smallest `N` in the policy's sequence whose uniform covariate regret
/// bound is strictly below `threshold`.
///
/// The bound is not monotone under integer rounding, so every size is
/// checked in increasing order. Sizes the policy cannot allocate are skipped.
pub fn sufficient_sample_size(
    threshold: f64,
    policy: &AllocationPolicy,
    grid: &RuleGrid,
    n_max: u64,
) -> Result<SampleSizeResult> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::invalid(format!("threshold must be positive, got {threshold}")));
    }
    let mut trace = Vec::new();
    for n in policy.sequence(n_max) {
        let Ok(counts) = allocate_counts(n, policy, grid) else {
            continue;
        };
        let precisions = NoisePrecision::from_counts(grid, &counts)?;
        let bound = uniform_regret_cmes(&precisions, grid.profile())?.value;
        trace.push(SampleSizeStep { total: n, bound });
        if bound < threshold {
            return Ok(SampleSizeResult {
                threshold,
                total: Some(n),
                trace,
            });
        }
    }
    Ok(SampleSizeResult {
        threshold,
        total: None,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PopulationProfile;

    #[test]
    fn single_ratio_design() {
        let d = optimize_saturation(&RatioSet::new(vec![0.4]).unwrap(), 10).unwrap();
        assert_eq!(d.alphas, vec![1.0]);
    }

    #[test]
    fn two_ratio_design_is_even() {
        let r = RatioSet::new(vec![0.0, 1.0]).unwrap();
        for n in [2, 3, 50, 1001] {
            assert_eq!(optimize_saturation(&r, n).unwrap().alphas, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn too_few_people() {
        let r = RatioSet::new(vec![0.0, 0.5, 1.0]).unwrap();
        assert!(matches!(optimize_saturation(&r, 2), Err(Error::Infeasible(_))));
    }

    #[test]
    fn proportional_endpoint_arms() {
        let grid = RuleGrid::from_ratios(&RatioSet::new(vec![0.0, 1.0]).unwrap());
        let policy = AllocationPolicy::Proportional { alphas: vec![0.5, 0.5] };
        let c = allocate_counts(100, &policy, &grid).unwrap();
        assert_eq!(c.as_nested(), &[vec![[50, 0]], vec![[0, 50]]]);
    }

    #[test]
    fn proportional_counts_sum_and_fill() {
        let grid = RuleGrid::new(
            vec![vec![0.5, 0.5], vec![0.7, 0.3]],
            PopulationProfile::low_high(0.9).unwrap(),
        )
        .unwrap();
        let policy = AllocationPolicy::Proportional { alphas: vec![0.5, 0.5] };
        for n in 8..200 {
            let c = allocate_counts(n, &policy, &grid).unwrap();
            assert_eq!(c.total(), n);
        }
        assert!(allocate_counts(7, &policy, &grid).is_err());
    }

    #[test]
    fn threshold_above_every_bound_returns_first_feasible() {
        let grid = RuleGrid::from_ratios(&RatioSet::new(vec![0.0, 1.0]).unwrap());
        let policy = AllocationPolicy::Proportional { alphas: vec![0.5, 0.5] };
        let r = sufficient_sample_size(1.0, &policy, &grid, 50).unwrap();
        assert_eq!(r.total, Some(2));
        assert!(sufficient_sample_size(0.0, &policy, &grid, 50).is_err());
    }
}
