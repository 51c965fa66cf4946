//! Sample-side welfare estimates and the empirical-success decision rules.
//!
//! Every rule here picks the arm with the largest estimated welfare. The
//! scalar version ([`mes_choose`]) ranks treatment fractions; the covariate
//! version ([`cmes_choose`]) ranks rule vectors, aggregating cell estimates
//! with population cell probabilities. [`vmes_vectorize`] and
//! [`plugin_rule`] express the same choice as a vector of pairwise
//! comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RatioSet, RuleGrid, SampleSummary, StratumStats, Treatment};

/// Two estimates closer than this are treated as tied.
pub const ESTIMATE_TOL: f64 = 1e-12;

/// How cell estimates are aggregated into a rule's welfare estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellWeights {
    /// Population probabilities from the grid's profile.
    #[default]
    Population,
    /// Share of all sampled individuals falling in each cell.
    SampleShares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelfareEstimate {
    /// `Û(π_k)` per grid rule.
    pub arms: Vec<f64>,
    /// Cell-conditional estimates `Û_l(π_k)`, indexed `[rule][cell]`.
    pub cells: Vec<Vec<f64>>,
    /// Cell weights used for aggregation.
    pub weights: Vec<f64>,
    /// Sampled arm backing each rule.
    pub sample_arms: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub chosen: usize,
    pub rule: Vec<f64>,
    /// The maximum was attained by more than one rule; `chosen` is the
    /// smallest such index.
    pub tie: bool,
    pub estimates: WelfareEstimate,
}

/// Estimated welfare contrast between rules `pair.0` and `pair.1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastStatistic {
    pub pair: (usize, usize),
    pub estimate: f64,
    pub studentizer: Option<f64>,
}

impl ContrastStatistic {
    pub fn reversed(&self) -> Self {
        ContrastStatistic {
            pair: (self.pair.1, self.pair.0),
            estimate: -self.estimate,
            studentizer: self.studentizer,
        }
    }
}

fn stratum_mean(stats: &StratumStats, arm: usize, cell: usize, t: Treatment) -> Result<f64> {
    stats.mean().ok_or(Error::EmptyStratum {
        arm,
        cell,
        treatment: t.index() as u8,
    })
}

/// `(1-π) Ȳ_0 + π Ȳ_1` in one cell of one sampled arm. Terms with zero
/// weight are dropped, so a ratio of 0 never reads the treated stratum.
pub fn empirical_cell_welfare(summary: &SampleSummary, arm: usize, cell: usize, ratio: f64) -> Result<f64> {
    let strata = summary
        .arms
        .get(arm)
        .and_then(|a| a.strata.get(cell))
        .ok_or_else(|| Error::invalid(format!("no arm {arm} / cell {cell} in sample")))?;
    let mut u = 0.0;
    for t in Treatment::BOTH {
        let w = t.weight(ratio);
        if w > 0.0 {
            u += w * stratum_mean(&strata[t.index()], arm, cell, t)?;
        }
    }
    Ok(u)
}

/// `Û(π)` for a single-cell sample arm.
pub fn empirical_arm_welfare(summary: &SampleSummary, arm: usize, ratio: f64) -> Result<f64> {
    if summary.cells() != 1 {
        return Err(Error::invalid("empirical_arm_welfare needs a single-cell sample"));
    }
    empirical_cell_welfare(summary, arm, 0, ratio)
}

fn cell_weights(summary: &SampleSummary, grid: &RuleGrid, mode: CellWeights) -> Result<Vec<f64>> {
    match mode {
        CellWeights::Population => Ok(grid.profile().probs().to_vec()),
        CellWeights::SampleShares => {
            let mut per_cell = vec![0u64; grid.cells()];
            for arm in &summary.arms {
                for (l, s) in arm.strata.iter().enumerate() {
                    per_cell[l] += s[0].count + s[1].count;
                }
            }
            let total: u64 = per_cell.iter().sum();
            if total == 0 {
                return Err(Error::invalid("sample is empty"));
            }
            Ok(per_cell.iter().map(|&n| n as f64 / total as f64).collect())
        }
    }
}

/// Estimates `Û(π_k) = Σ_l w_l Û_l(π_k)` for every rule in the grid.
pub fn estimate_grid(summary: &SampleSummary, grid: &RuleGrid, mode: CellWeights) -> Result<WelfareEstimate> {
    if summary.cells() != grid.cells() {
        return Err(Error::invalid(format!(
            "sample has {} cells but the grid has {}",
            summary.cells(),
            grid.cells()
        )));
    }
    let weights = cell_weights(summary, grid, mode)?;
    let mut arms = Vec::with_capacity(grid.len());
    let mut cells = Vec::with_capacity(grid.len());
    let mut sample_arms = Vec::with_capacity(grid.len());
    for rule in grid.rules() {
        let a = summary.arm_for(rule).ok_or_else(|| Error::MissingCell { rule: rule.clone() })?;
        let mut total = 0.0;
        let mut per_cell = Vec::with_capacity(rule.len());
        for (l, (&r, &w)) in rule.iter().zip(&weights).enumerate() {
            let u = empirical_cell_welfare(summary, a, l, r)?;
            total += w * u;
            per_cell.push(u);
        }
        arms.push(total);
        cells.push(per_cell);
        sample_arms.push(a);
    }
    Ok(WelfareEstimate {
        arms,
        cells,
        weights,
        sample_arms,
    })
}

/// Index of the largest value (smallest index among near-ties) and whether
/// the maximum is shared.
pub fn argmax_with_tie(values: &[f64]) -> (usize, bool) {
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut near = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| top - v <= ESTIMATE_TOL)
        .map(|(k, _)| k);
    let best = near.next().unwrap_or(0);
    (best, near.next().is_some())
}

fn decide(grid: &RuleGrid, estimates: WelfareEstimate) -> DecisionOutcome {
    let (chosen, tie) = argmax_with_tie(&estimates.arms);
    DecisionOutcome {
        chosen,
        rule: grid.rule(chosen).to_vec(),
        tie,
        estimates,
    }
}

/// Empirical success choice among scalar treatment fractions.
pub fn mes_choose(summary: &SampleSummary, ratios: &RatioSet) -> Result<DecisionOutcome> {
    if summary.cells() != 1 {
        return Err(Error::invalid("mes_choose needs a single-cell sample; use cmes_choose"));
    }
    let grid = RuleGrid::from_ratios(ratios);
    let estimates = estimate_grid(summary, &grid, CellWeights::Population)?;
    Ok(decide(&grid, estimates))
}

/// Empirical success choice among covariate-dependent rule vectors.
pub fn cmes_choose(summary: &SampleSummary, grid: &RuleGrid, mode: CellWeights) -> Result<DecisionOutcome> {
    let estimates = estimate_grid(summary, grid, mode)?;
    Ok(decide(grid, estimates))
}

/// Pairwise comparison vector: entry for `(k, k')`, `k < k'`, in
/// lexicographic pair order, is `true` iff `Û_k > Û_k'`.
pub fn vmes_vectorize(estimates: &[f64]) -> Result<Vec<bool>> {
    let k = estimates.len();
    let mut out = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            if (estimates[i] - estimates[j]).abs() <= ESTIMATE_TOL {
                return Err(Error::Tie { first: i, second: j });
            }
            out.push(estimates[i] > estimates[j]);
        }
    }
    Ok(out)
}

/// Position of pair `(i, j)`, `i < j`, in a comparison vector over `k` arms.
pub fn pair_index(i: usize, j: usize, k: usize) -> usize {
    debug_assert!(i < j && j < k);
    i * (2 * k - i - 1) / 2 + (j - i - 1)
}

/// The arm that wins all `k - 1` of its comparisons, if any.
pub fn vmes_winner(bits: &[bool], k: usize) -> Option<usize> {
    if bits.len() != k * k.saturating_sub(1) / 2 {
        return None;
    }
    (0..k).find(|&a| {
        (0..k).filter(|&b| b != a).all(|b| {
            if a < b {
                bits[pair_index(a, b, k)]
            } else {
                !bits[pair_index(b, a, k)]
            }
        })
    })
}

/// Contrast `Û_a - Û_b` with its stratified standard error.
///
/// The standard error sums `(w_l · weight_t)² · s²/N` over every stratum of
/// both arms, where `s²` is the plug-in variance of the stratum. It is `None`
/// when that sum is zero.
pub fn contrast(
    summary: &SampleSummary,
    grid: &RuleGrid,
    estimates: &WelfareEstimate,
    a: usize,
    b: usize,
) -> ContrastStatistic {
    let mut var = 0.0;
    for k in [a, b] {
        let arm = &summary.arms[estimates.sample_arms[k]];
        for (l, (&r, &w)) in grid.rule(k).iter().zip(&estimates.weights).enumerate() {
            for t in Treatment::BOTH {
                let coef = w * t.weight(r);
                if coef > 0.0 {
                    let s = &arm.strata[l][t.index()];
                    var += coef * coef * s.variance().unwrap_or(0.0) / s.count as f64;
                }
            }
        }
    }
    let sd = var.sqrt();
    ContrastStatistic {
        pair: (a, b),
        estimate: estimates.arms[a] - estimates.arms[b],
        studentizer: (sd > 0.0).then_some(sd),
    }
}

/// `I(√n · ĝ / σ̂ > 0)`.
pub fn plugin_rule(contrast: &ContrastStatistic, n: u64) -> Result<bool> {
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    match contrast.studentizer {
        Some(s) if s > 0.0 && s.is_finite() => Ok((n as f64).sqrt() * contrast.estimate / s > 0.0),
        _ => Err(Error::invalid("studentizer must be positive")),
    }
}

/// Rule chosen by applying [`plugin_rule`] to every pair; `None` when some
/// studentizer is undefined or no rule wins all its comparisons.
pub fn plugin_choose(summary: &SampleSummary, grid: &RuleGrid, estimates: &WelfareEstimate) -> Option<usize> {
    let k = grid.len();
    let n = summary.counts().total().max(1);
    let mut bits = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            bits.push(plugin_rule(&contrast(summary, grid, estimates, i, j), n).ok()?);
        }
    }
    vmes_winner(&bits, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArmSample, ExperimentSample, PopulationProfile};

    fn scalar_sample(arms: &[(f64, &[f64], &[f64])]) -> SampleSummary {
        let arms = arms
            .iter()
            .map(|&(r, y0, y1)| {
                let mut a = ArmSample::new(vec![r]);
                y0.iter().for_each(|&y| a.push(0, Treatment::Control, y).unwrap());
                y1.iter().for_each(|&y| a.push(0, Treatment::Treated, y).unwrap());
                a
            })
            .collect();
        ExperimentSample::new(arms).unwrap().summary()
    }

    #[test]
    fn arm_welfare_endpoint_convention() {
        let s = scalar_sample(&[(0.0, &[0.3, 0.5], &[])]);
        assert!((empirical_arm_welfare(&s, 0, 0.0).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn arm_welfare_constant_outcomes() {
        let s = scalar_sample(&[(0.3, &[0.6, 0.6], &[0.6])]);
        assert!((empirical_arm_welfare(&s, 0, 0.3).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn arm_welfare_interior() {
        let s = scalar_sample(&[(0.5, &[0.2, 0.4], &[0.8])]);
        assert!((empirical_arm_welfare(&s, 0, 0.5).unwrap() - 0.55).abs() < 1e-15);
    }

    #[test]
    fn arm_welfare_empty_stratum() {
        let s = scalar_sample(&[(0.5, &[0.2], &[])]);
        assert_eq!(
            empirical_arm_welfare(&s, 0, 0.5),
            Err(Error::EmptyStratum { arm: 0, cell: 0, treatment: 1 })
        );
    }

    #[test]
    fn mes_single_ratio() {
        let s = scalar_sample(&[(0.4, &[0.2], &[0.9])]);
        let d = mes_choose(&s, &RatioSet::new(vec![0.4]).unwrap()).unwrap();
        assert_eq!(d.chosen, 0);
        assert!(!d.tie);
    }

    #[test]
    fn mes_reduces_to_mean_comparison() {
        let s = scalar_sample(&[(0.0, &[0.2, 0.4], &[]), (1.0, &[], &[0.5, 0.5])]);
        let d = mes_choose(&s, &RatioSet::new(vec![0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(d.rule, vec![1.0]);
    }

    #[test]
    fn mes_three_arms() {
        // estimates 0.2, 0.9, 0.4 with constant outcomes per arm
        let s = scalar_sample(&[(0.0, &[0.2], &[]), (0.5, &[0.9], &[0.9]), (1.0, &[], &[0.4])]);
        let d = mes_choose(&s, &RatioSet::new(vec![0.0, 0.5, 1.0]).unwrap()).unwrap();
        assert_eq!(d.chosen, 1);
        assert!(!d.tie);
    }

    #[test]
    fn mes_missing_arm() {
        let s = scalar_sample(&[(0.0, &[0.2], &[])]);
        assert!(matches!(
            mes_choose(&s, &RatioSet::new(vec![0.0, 1.0]).unwrap()),
            Err(Error::MissingCell { .. })
        ));
    }

    #[test]
    fn ties_pick_smallest_index() {
        assert_eq!(argmax_with_tie(&[0.3, 0.5, 0.5]), (1, true));
        assert_eq!(argmax_with_tie(&[0.5, 0.5 + 1e-13]), (0, true));
        assert_eq!(argmax_with_tie(&[0.5, 0.6]), (1, false));
    }

    fn targeting_sample(c: Option<f64>) -> SampleSummary {
        // both arms see low: Y0=0, Y1=1 and high: Y0=1, Y1=0
        let mut arms = Vec::new();
        for rule in [vec![0.5, 0.5], vec![0.7, 0.3]] {
            let mut a = ArmSample::new(rule);
            let v = |x: f64| c.unwrap_or(x);
            a.push(0, Treatment::Control, v(0.0)).unwrap();
            a.push(0, Treatment::Treated, v(1.0)).unwrap();
            a.push(1, Treatment::Control, v(1.0)).unwrap();
            a.push(1, Treatment::Treated, v(0.0)).unwrap();
            arms.push(a);
        }
        ExperimentSample::new(arms).unwrap().summary()
    }

    #[test]
    fn cmes_targeting_example() {
        let grid = RuleGrid::new(
            vec![vec![0.5, 0.5], vec![0.7, 0.3]],
            PopulationProfile::low_high(0.5).unwrap(),
        )
        .unwrap();
        let d = cmes_choose(&targeting_sample(None), &grid, CellWeights::Population).unwrap();
        assert_eq!(d.rule, vec![0.7, 0.3]);
        assert!((d.estimates.arms[0] - 0.5).abs() < 1e-12);
        assert!((d.estimates.arms[1] - 0.7).abs() < 1e-12);
        assert!(!d.tie);
    }

    #[test]
    fn cmes_constant_outcomes_tie() {
        let grid = RuleGrid::new(
            vec![vec![0.5, 0.5], vec![0.7, 0.3]],
            PopulationProfile::low_high(0.5).unwrap(),
        )
        .unwrap();
        let d = cmes_choose(&targeting_sample(Some(0.4)), &grid, CellWeights::Population).unwrap();
        assert!(d.tie);
        assert_eq!(d.chosen, 0);
    }

    #[test]
    fn cmes_sample_shares() {
        let grid = RuleGrid::new(
            vec![vec![0.5, 0.5], vec![0.7, 0.3]],
            PopulationProfile::low_high(0.9).unwrap(),
        )
        .unwrap();
        let d = cmes_choose(&targeting_sample(None), &grid, CellWeights::SampleShares).unwrap();
        assert_eq!(d.estimates.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn vmes_examples() {
        assert!(vmes_vectorize(&[0.3]).unwrap().is_empty());
        assert_eq!(vmes_vectorize(&[0.2, 0.9, 0.4]).unwrap(), vec![false, false, true]);
        assert_eq!(vmes_winner(&[false, false, true], 3), Some(1));
        assert_eq!(vmes_vectorize(&[0.2, 0.2]), Err(Error::Tie { first: 0, second: 1 }));
    }

    #[test]
    fn pair_index_is_lexicographic() {
        let k = 5;
        let mut expect = 0;
        for i in 0..k {
            for j in i + 1..k {
                assert_eq!(pair_index(i, j, k), expect);
                expect += 1;
            }
        }
    }

    #[test]
    fn plugin_examples() {
        let c = |g: f64, s: f64| ContrastStatistic {
            pair: (0, 1),
            estimate: g,
            studentizer: Some(s),
        };
        assert!(!plugin_rule(&c(0.0, 1.0), 10).unwrap());
        assert!(plugin_rule(&c(0.2, 1.0), 100).unwrap());
        for scale in [1e-3, 1.0, 7.5, 1e4] {
            assert!(plugin_rule(&c(0.2, scale), 100).unwrap());
            assert!(!plugin_rule(&c(-0.2, scale), 100).unwrap());
        }
        assert!(plugin_rule(&c(0.2, 0.0), 100).is_err());
        assert!(plugin_rule(&c(0.2, -1.0), 100).is_err());
    }

    #[test]
    fn contrast_antisymmetry() {
        let s = scalar_sample(&[(0.0, &[0.2, 0.4], &[]), (1.0, &[], &[0.5, 0.9])]);
        let grid = RuleGrid::from_ratios(&RatioSet::new(vec![0.0, 1.0]).unwrap());
        let est = estimate_grid(&s, &grid, CellWeights::Population).unwrap();
        let ab = contrast(&s, &grid, &est, 0, 1);
        let ba = contrast(&s, &grid, &est, 1, 0);
        assert_eq!(ab.reversed(), ba);
        // (0.01/2) + (0.04/2)
        assert!((ab.studentizer.unwrap() - 0.025f64.sqrt()).abs() < 1e-12);
    }
}
