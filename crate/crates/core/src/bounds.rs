//! Closed-form finite-sample bounds on the welfare and regret of the
//! empirical success rules.
//!
//! Every bound is driven by the noise precision of each (rule, cell) pair,
//!
//! ```text
//! A_kl = (1 - π_kl)² / N_k0l + π_kl² / N_k1l,
//! ```
//!
//! which is the Hoeffding variance proxy of the cell's welfare estimate. A
//! rule's aggregate proxy against rule `j` is `Σ_l p_l² (A_kl + A_jl)`; with a
//! single cell this is `A_k + A_j`.
//!
//! The welfare bounds need the true welfare of every rule, so the caller
//! supplies them. The uniform regret bounds depend on counts alone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MeanEntry, PopulationProfile, RuleGrid, StateOfNature, StratumCounts, Treatment};

/// `½ e^{-1/2}`, the maximum of `Δ exp(-2Δ²/S) / √S` over `Δ ≥ 0`.
pub fn envelope_factor() -> f64 {
    0.5 * (-0.5f64).exp()
}

/// Largest number of free mean variables the vertex enumeration accepts.
pub const MAX_VERTEX_VARIABLES: usize = 24;

/// Noise precision `A_kl` per (rule, cell).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePrecision {
    values: Vec<Vec<f64>>,
}

impl NoisePrecision {
    /// Precision table laid out `[rule][cell]`. Zero entries stand for
    /// unboundedly large strata.
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() || values[0].is_empty() {
            return Err(Error::invalid("precision table is empty"));
        }
        let cells = values[0].len();
        if values.iter().any(|r| r.len() != cells) {
            return Err(Error::invalid("precision table is ragged"));
        }
        if values.iter().flatten().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::invalid("precisions must be finite and nonnegative"));
        }
        Ok(NoisePrecision { values })
    }

    /// Single-cell precisions `A_k`.
    pub fn scalar(values: Vec<f64>) -> Result<Self> {
        Self::new(values.into_iter().map(|a| vec![a]).collect())
    }

    /// Computes `A_kl` from stratum counts; endpoint strata with zero weight
    /// are skipped.
    pub fn from_counts(grid: &RuleGrid, counts: &StratumCounts) -> Result<Self> {
        counts.validate(grid)?;
        let values = grid
            .rules()
            .iter()
            .enumerate()
            .map(|(k, rule)| {
                rule.iter()
                    .enumerate()
                    .map(|(l, &r)| {
                        Treatment::BOTH
                            .into_iter()
                            .filter(|t| t.weight(r) > 0.0)
                            .map(|t| t.weight(r).powi(2) / counts.get(k, l, t) as f64)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        Self::new(values)
    }

    pub fn arms(&self) -> usize {
        self.values.len()
    }

    pub fn cells(&self) -> usize {
        self.values[0].len()
    }

    pub fn get(&self, arm: usize, cell: usize) -> f64 {
        self.values[arm][cell]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// `Σ_l w_l² A_kl`.
    pub fn weighted(&self, arm: usize, weights: &[f64]) -> f64 {
        self.values[arm].iter().zip(weights).map(|(a, w)| w * w * a).sum()
    }

    /// `Σ_l w_l² (A_kl + A_jl)`.
    pub fn pair_proxy(&self, k: usize, j: usize, weights: &[f64]) -> f64 {
        let mut s = 0.0;
        for (l, w) in weights.iter().enumerate() {
            s += w * w * (self.values[k][l] + self.values[j][l]);
        }
        s
    }
}

/// Hoeffding tail `exp(-2 δ² / S)`.
pub fn hoeffding_tail(delta: f64, s: f64) -> Result<f64> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!("gap {delta} must be finite and nonnegative")));
    }
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::invalid(format!("variance proxy {s} must be positive")));
    }
    Ok((-2.0 * delta * delta / s).exp())
}

/// One summand `exp(-2Δ²/S) Δ` of the finite-sample penalty. A zero proxy
/// means an exact estimate, which contributes nothing.
fn penalty_term(delta: f64, s: f64) -> f64 {
    if delta == 0.0 || s == 0.0 {
        0.0
    } else {
        (-2.0 * delta * delta / s).exp() * delta
    }
}

fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

fn check_welfares(welfares: &[f64], precisions: &NoisePrecision) -> Result<()> {
    if welfares.is_empty() {
        return Err(Error::invalid("no welfares supplied"));
    }
    if welfares.len() != precisions.arms() {
        return Err(Error::invalid(format!(
            "{} welfares for {} precision rows",
            welfares.len(),
            precisions.arms()
        )));
    }
    if welfares.iter().any(|u| !u.is_finite()) {
        return Err(Error::invalid("welfares must be finite"));
    }
    Ok(())
}

/// Which covariate partition a welfare bound was computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Unconditional,
    Fine,
    Coarse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelfareBounds {
    pub lower: f64,
    pub upper: f64,
    /// Finite-sample penalty `D = upper - lower`.
    pub penalty: f64,
    /// Index of the welfare-maximizing rule (smallest index on ties).
    pub best: usize,
    pub partition: Partition,
}

/// Expected-welfare sandwich for the scalar empirical success rule:
///
/// ```text
/// U* - Σ_k exp(-2Δ_k² / (A_k + A*)) Δ_k  ≤  u(δ, θ)  ≤  U*.
/// ```
pub fn mes_welfare_bounds(welfares: &[f64], precisions: &NoisePrecision) -> Result<WelfareBounds> {
    check_welfares(welfares, precisions)?;
    if precisions.cells() != 1 {
        return Err(Error::invalid("scalar bounds need single-cell precisions"));
    }
    let best = first_argmax(welfares);
    let top = welfares[best];
    let a_best = precisions.get(best, 0);
    let mut penalty = 0.0;
    for (k, &u) in welfares.iter().enumerate() {
        penalty += penalty_term(top - u, precisions.get(k, 0) + a_best);
    }
    Ok(WelfareBounds {
        lower: top - penalty,
        upper: top,
        penalty,
        best,
        partition: Partition::Unconditional,
    })
}

fn weighted_welfare_bounds(
    welfares: &[f64],
    precisions: &NoisePrecision,
    profile: &PopulationProfile,
    partition: Partition,
) -> Result<WelfareBounds> {
    check_welfares(welfares, precisions)?;
    if precisions.cells() != profile.len() {
        return Err(Error::invalid("precision table and profile disagree on cells"));
    }
    let weights = profile.probs();
    let best = first_argmax(welfares);
    let top = welfares[best];
    let mut penalty = 0.0;
    for (k, &u) in welfares.iter().enumerate() {
        penalty += penalty_term(top - u, precisions.pair_proxy(k, best, weights));
    }
    Ok(WelfareBounds {
        lower: top - penalty,
        upper: top,
        penalty,
        best,
        partition,
    })
}

/// Expected-welfare sandwich for the covariate-dependent rule, with
/// aggregate proxies `Σ_l p_l² (A_kl + A*_l)`.
pub fn cmes_welfare_bounds(
    welfares: &[f64],
    precisions: &NoisePrecision,
    profile: &PopulationProfile,
) -> Result<WelfareBounds> {
    weighted_welfare_bounds(welfares, precisions, profile, Partition::Fine)
}

/// Same sandwich computed for a rule conditioned on a coarser partition;
/// the inputs are indexed by coarse rules and coarse cells.
pub fn coarse_welfare_bounds(
    welfares: &[f64],
    precisions: &NoisePrecision,
    profile: &PopulationProfile,
) -> Result<WelfareBounds> {
    weighted_welfare_bounds(welfares, precisions, profile, Partition::Coarse)
}

fn check_arm(precisions: &NoisePrecision, best: usize) -> Result<()> {
    if best >= precisions.arms() {
        return Err(Error::invalid(format!("arm {best} out of range")));
    }
    Ok(())
}

/// `½ e^{-1/2} Σ_{k≠best} √(A_k + A_best)`: the penalty at its worst-case gaps.
pub fn penalty_upper(precisions: &NoisePrecision, best: usize) -> Result<f64> {
    check_arm(precisions, best)?;
    if precisions.cells() != 1 {
        return Err(Error::invalid("scalar penalty bound needs single-cell precisions"));
    }
    let a_best = precisions.get(best, 0);
    let sum: f64 = (0..precisions.arms())
        .filter(|&k| k != best)
        .map(|k| (precisions.get(k, 0) + a_best).sqrt())
        .sum();
    Ok(envelope_factor() * sum)
}

/// Covariate version of [`penalty_upper`].
pub fn penalty_upper_weighted(precisions: &NoisePrecision, profile: &PopulationProfile, best: usize) -> Result<f64> {
    check_arm(precisions, best)?;
    let w = profile.probs();
    let sum: f64 = (0..precisions.arms())
        .filter(|&k| k != best)
        .map(|k| precisions.pair_proxy(k, best, w).sqrt())
        .sum();
    Ok(envelope_factor() * sum)
}

/// State-free bound on the maximum regret, with the arm whose precision
/// stands in for the unknown best arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformBound {
    pub value: f64,
    pub reference: usize,
}

/// `½ e^{-1/2} Σ_{k≠r} √(A_k + A_r)` with `r` the first arm of largest `A`.
///
/// Arms tied with `r` stay in the sum.
pub fn uniform_regret_mes(precisions: &NoisePrecision) -> Result<UniformBound> {
    if precisions.cells() != 1 {
        return Err(Error::invalid("scalar uniform bound needs single-cell precisions"));
    }
    let a: Vec<f64> = (0..precisions.arms()).map(|k| precisions.get(k, 0)).collect();
    let reference = first_argmax(&a);
    Ok(UniformBound {
        value: penalty_upper(precisions, reference)?,
        reference,
    })
}

/// `½ e^{-1/2} Σ_{k≠r} √(Σ_l p_l² (A_kl + A_rl))` where `r` maximizes
/// `Σ_l p_l² A_kl` (smallest index on ties).
pub fn uniform_regret_cmes(precisions: &NoisePrecision, profile: &PopulationProfile) -> Result<UniformBound> {
    if precisions.cells() != profile.len() {
        return Err(Error::invalid("precision table and profile disagree on cells"));
    }
    let agg: Vec<f64> = (0..precisions.arms())
        .map(|k| precisions.weighted(k, profile.probs()))
        .collect();
    let reference = first_argmax(&agg);
    Ok(UniformBound {
        value: penalty_upper_weighted(precisions, profile, reference)?,
        reference,
    })
}

/// Which form of the copula-based lower bound to compute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrechetVariant {
    /// `max{1 - Σ_{j≠M*} exp(-2Δ²/(A_j + A_M*)), 0} · U*`.
    #[default]
    Sound,
    /// The sum over every arm `k`, with the Hoeffding tail applied to each.
    /// Not a valid bound: the tail only holds when `k` is the best arm, and
    /// the value can exceed `U*`. Provided for comparison only.
    AllArms,
}

/// Lower bound on expected welfare from the Fréchet–Hoeffding copula bound.
pub fn frechet_lower_bound(welfares: &[f64], precisions: &NoisePrecision, variant: FrechetVariant) -> Result<f64> {
    check_welfares(welfares, precisions)?;
    if precisions.cells() != 1 {
        return Err(Error::invalid("copula bound needs single-cell precisions"));
    }
    let tail = |j: usize, k: usize| {
        let delta = (welfares[j] - welfares[k]).abs();
        let s = precisions.get(j, 0) + precisions.get(k, 0);
        if delta == 0.0 {
            1.0
        } else if s == 0.0 {
            0.0
        } else {
            (-2.0 * delta * delta / s).exp()
        }
    };
    let mass = |k: usize| {
        let miss: f64 = (0..welfares.len()).filter(|&j| j != k).map(|j| tail(j, k)).sum();
        (1.0 - miss).max(0.0)
    };
    Ok(match variant {
        FrechetVariant::Sound => {
            let best = first_argmax(welfares);
            mass(best) * welfares[best]
        }
        FrechetVariant::AllArms => (0..welfares.len()).map(|k| mass(k) * welfares[k]).sum(),
    })
}

/// A fine rule grid together with a coarser partition of its cells and the
/// rules available when only the coarse cell is observed.
#[derive(Debug, Clone, PartialEq)]
pub struct Coarsening {
    fine: RuleGrid,
    cell_map: Vec<usize>,
    coarse: RuleGrid,
}

impl Coarsening {
    /// `cell_map[l]` is the coarse cell containing fine cell `l`. The coarse
    /// profile must be the image of the fine one.
    pub fn new(fine: RuleGrid, cell_map: Vec<usize>, coarse: RuleGrid) -> Result<Self> {
        if cell_map.len() != fine.cells() {
            return Err(Error::invalid("cell map length differs from the fine cell count"));
        }
        let lz = coarse.cells();
        if cell_map.iter().any(|&z| z >= lz) {
            return Err(Error::invalid("cell map points past the coarse cells"));
        }
        let mut mass = vec![0.0; lz];
        for (l, &z) in cell_map.iter().enumerate() {
            mass[z] += fine.profile().probs()[l];
        }
        for (z, (&m, &q)) in mass.iter().zip(coarse.profile().probs()).enumerate() {
            if !cell_map.contains(&z) {
                return Err(Error::invalid(format!("coarse cell {z} contains no fine cell")));
            }
            if (m - q).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "coarse cell {z} has probability {q} but its fine cells sum to {m}"
                )));
            }
        }
        Ok(Coarsening {
            fine,
            cell_map,
            coarse,
        })
    }

    /// Identical fine and coarse partitions.
    pub fn identity(grid: RuleGrid) -> Self {
        let map = (0..grid.cells()).collect();
        Coarsening {
            coarse: grid.clone(),
            fine: grid,
            cell_map: map,
        }
    }

    /// For each fine rule, the coarse rule treating the same fraction of each
    /// coarse cell (and therefore of the population). Duplicates are merged.
    pub fn exposure_matched(fine: RuleGrid, cell_map: Vec<usize>) -> Result<Self> {
        let lz = cell_map.iter().copied().max().map_or(0, |m| m + 1);
        if cell_map.len() != fine.cells() || lz == 0 {
            return Err(Error::invalid("cell map length differs from the fine cell count"));
        }
        let p = fine.profile().probs();
        let mut mass = vec![0.0; lz];
        let mut labels = vec![Vec::new(); lz];
        for (l, &z) in cell_map.iter().enumerate() {
            mass[z] += p[l];
            labels[z].push(fine.profile().cells()[l].clone());
        }
        let labels: Vec<String> = labels.into_iter().map(|v| v.join("+")).collect();
        let total: f64 = mass.iter().sum();
        let probs: Vec<f64> = mass.iter().map(|m| m / total).collect();
        let profile = PopulationProfile::new(labels, probs)?;
        let mut rules: Vec<Vec<f64>> = Vec::new();
        for rule in fine.rules() {
            let mut z_rule = vec![0.0; lz];
            let mut members = vec![0usize; lz];
            for (l, &z) in cell_map.iter().enumerate() {
                z_rule[z] += p[l] * rule[l];
                members[z] += 1;
            }
            for z in 0..lz {
                z_rule[z] = if mass[z] > 0.0 {
                    (z_rule[z] / mass[z]).clamp(0.0, 1.0)
                } else {
                    let (s, n) = cell_map
                        .iter()
                        .enumerate()
                        .filter(|(_, &zz)| zz == z)
                        .fold((0.0, 0), |(s, n), (l, _)| (s + rule[l], n + 1));
                    s / n as f64
                };
            }
            if !rules.iter().any(|r| crate::model::same_rule(r, &z_rule)) {
                rules.push(z_rule);
            }
        }
        let coarse = RuleGrid::new(rules, profile)?;
        Self::new(fine, cell_map, coarse)
    }

    pub fn fine(&self) -> &RuleGrid {
        &self.fine
    }

    pub fn coarse(&self) -> &RuleGrid {
        &self.coarse
    }

    pub fn cell_map(&self) -> &[usize] {
        &self.cell_map
    }

    /// A coarse rule written as a fine rule constant within coarse cells.
    pub fn expand(&self, coarse_rule: &[f64]) -> Vec<f64> {
        self.cell_map.iter().map(|&z| coarse_rule[z]).collect()
    }

    /// Sorted exposures reached by either grid.
    pub fn mean_domain(&self) -> Vec<f64> {
        let mut e: Vec<f64> = self.fine.exposures().to_vec();
        for rule in self.coarse.rules() {
            e.push(self.fine.profile().exposure(&self.expand(rule)).clamp(0.0, 1.0));
        }
        e.sort_by(|a, b| a.total_cmp(b));
        e.dedup_by(|a, b| (*a - *b).abs() <= crate::model::EXPOSURE_TOL);
        e
    }
}

/// Worst-case value found by vertex enumeration, with the state attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub value: f64,
    pub witness: StateOfNature,
}

// Welfare of each rule as a sparse linear form over the active mean variables.
struct LinearWelfares {
    variables: Vec<(Treatment, usize, f64)>,
    fine: Vec<Vec<(usize, f64)>>,
    coarse: Vec<Vec<(usize, f64)>>,
}

impl LinearWelfares {
    fn build(c: &Coarsening) -> Result<Self> {
        let profile = c.fine.profile();
        let domain = c.mean_domain();
        let mut variables: Vec<(Treatment, usize, f64)> = Vec::new();
        let mut form = |rule: &[f64]| -> Vec<(usize, f64)> {
            let e = profile.exposure(rule).clamp(0.0, 1.0);
            let e = *domain
                .iter()
                .find(|&&d| (d - e).abs() <= crate::model::EXPOSURE_TOL)
                .expect("exposure is in the mean domain");
            let mut out = Vec::new();
            for (l, (&p, &r)) in profile.probs().iter().zip(rule).enumerate() {
                for t in Treatment::BOTH {
                    let coef = p * t.weight(r);
                    if coef > 0.0 {
                        let v = match variables.iter().position(|&(tt, ll, ee)| tt == t && ll == l && ee == e) {
                            Some(v) => v,
                            None => {
                                variables.push((t, l, e));
                                variables.len() - 1
                            }
                        };
                        out.push((v, coef));
                    }
                }
            }
            out
        };
        let fine: Vec<_> = c.fine.rules().iter().map(|r| form(r)).collect();
        let coarse: Vec<_> = c.coarse.rules().iter().map(|r| form(&c.expand(r))).collect();
        if variables.len() > MAX_VERTEX_VARIABLES {
            return Err(Error::EnumerationTooLarge {
                variables: variables.len(),
            });
        }
        Ok(LinearWelfares {
            variables,
            fine,
            coarse,
        })
    }

    fn eval(form: &[(usize, f64)], mask: u64) -> f64 {
        form.iter()
            .filter(|(v, _)| mask >> v & 1 == 1)
            .map(|(_, c)| c)
            .sum()
    }

    fn welfares(forms: &[Vec<(usize, f64)>], mask: u64) -> Vec<f64> {
        forms.iter().map(|f| Self::eval(f, mask)).collect()
    }

    fn state(&self, cells: usize, mask: u64) -> StateOfNature {
        let mut s = StateOfNature::new(cells).expect("grid has cells");
        for (v, &(t, l, e)) in self.variables.iter().enumerate() {
            let m = (mask >> v & 1) as f64;
            s.insert(t, l, e, m).expect("vertex means are valid");
        }
        s
    }

    // Max of `objective` over all 0/1 mean assignments; ties go to the
    // smallest mask so the result does not depend on how work is split.
    fn maximize(&self, objective: impl Fn(u64) -> f64 + Sync) -> (f64, u64) {
        let n = 1u64 << self.variables.len();
        (0..n)
            .into_par_iter()
            .map(|m| (objective(m), m))
            .reduce(
                || (f64::NEG_INFINITY, u64::MAX),
                |a, b| {
                    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                        b
                    } else {
                        a
                    }
                },
            )
    }
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Worst-case welfare lost by conditioning on the coarse partition only:
/// the supremum over states of `max_k U(fine_k) - max_j U(coarse_j)`.
///
/// Welfare is linear in the means, and the supremum is taken over the vertex
/// states where every free mean is 0 or 1. The result is floored at zero.
pub fn conditioning_gap(c: &Coarsening) -> Result<GapReport> {
    let forms = LinearWelfares::build(c)?;
    let (value, mask) = forms.maximize(|m| {
        max_of(&LinearWelfares::welfares(&forms.fine, m)) - max_of(&LinearWelfares::welfares(&forms.coarse, m))
    });
    Ok(GapReport {
        value: value.max(0.0),
        witness: forms.state(c.fine.cells(), mask),
    })
}

/// Upper end of the maximum-regret bracket for the coarse rule: the
/// supremum over vertex states of the conditioning gap plus the coarse
/// rule's finite-sample penalty. Never below [`conditioning_gap`].
///
/// `coarse_precisions` is indexed by coarse rule and coarse cell.
pub fn conditioning_gap_upper(c: &Coarsening, coarse_precisions: &NoisePrecision) -> Result<GapReport> {
    if coarse_precisions.arms() != c.coarse.len() || coarse_precisions.cells() != c.coarse.cells() {
        return Err(Error::invalid("coarse precisions do not match the coarse grid"));
    }
    let forms = LinearWelfares::build(c)?;
    let weights = c.coarse.profile().probs();
    let (value, mask) = forms.maximize(|m| {
        let fine = LinearWelfares::welfares(&forms.fine, m);
        let coarse = LinearWelfares::welfares(&forms.coarse, m);
        let best = first_argmax(&coarse);
        let penalty: f64 = coarse
            .iter()
            .enumerate()
            .map(|(k, &u)| penalty_term(coarse[best] - u, coarse_precisions.pair_proxy(k, best, weights)))
            .sum();
        max_of(&fine) - coarse[best] + penalty
    });
    Ok(GapReport {
        value: value.max(0.0),
        witness: forms.state(c.fine.cells(), mask),
    })
}

/// Everything the bounds module can say about one design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub welfare_lower: Option<f64>,
    pub welfare_upper: Option<f64>,
    pub penalty: Option<f64>,
    /// Worst-case penalty at the true best rule, when welfares are known.
    pub penalty_upper: Option<f64>,
    pub best: Option<usize>,
    pub uniform_regret_upper: f64,
    /// Rule whose precision replaces the unknown best rule's.
    pub reference: usize,
    pub precisions: NoisePrecision,
}

impl BoundReport {
    /// Bounds for a grid and its stratum counts. Single-cell grids use the
    /// scalar formulas; welfares, when given, add the welfare sandwich.
    pub fn compute(grid: &RuleGrid, counts: &StratumCounts, welfares: Option<&[f64]>) -> Result<Self> {
        let precisions = NoisePrecision::from_counts(grid, counts)?;
        let scalar = grid.cells() == 1;
        let uniform = if scalar {
            uniform_regret_mes(&precisions)?
        } else {
            uniform_regret_cmes(&precisions, grid.profile())?
        };
        let mut report = BoundReport {
            welfare_lower: None,
            welfare_upper: None,
            penalty: None,
            penalty_upper: None,
            best: None,
            uniform_regret_upper: uniform.value,
            reference: uniform.reference,
            precisions,
        };
        if let Some(u) = welfares {
            let b = if scalar {
                mes_welfare_bounds(u, &report.precisions)?
            } else {
                cmes_welfare_bounds(u, &report.precisions, grid.profile())?
            };
            report.welfare_lower = Some(b.lower);
            report.welfare_upper = Some(b.upper);
            report.penalty = Some(b.penalty);
            report.best = Some(b.best);
            report.penalty_upper = Some(if scalar {
                penalty_upper(&report.precisions, b.best)?
            } else {
                penalty_upper_weighted(&report.precisions, grid.profile(), b.best)?
            });
        }
        Ok(report)
    }
}

/// Flattened view of a state, used in reports.
pub fn state_entries(state: &StateOfNature) -> Vec<MeanEntry> {
    state.entries().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RatioSet;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn hoeffding_examples() {
        assert_eq!(hoeffding_tail(0.0, 0.3).unwrap(), 1.0);
        let s: f64 = 0.04;
        close(hoeffding_tail(s.sqrt() / 2.0, s).unwrap(), (-0.5f64).exp(), 1e-15);
        close(hoeffding_tail(s.sqrt(), s).unwrap(), 0.1353352832366127, 1e-15);
        close((-0.5f64).exp(), 0.60653, 1e-5);
        assert!(hoeffding_tail(0.1, 0.0).is_err());
        assert!(hoeffding_tail(-0.1, 1.0).is_err());
    }

    #[test]
    fn scalar_bounds_examples() {
        let one = NoisePrecision::scalar(vec![0.1]).unwrap();
        let b = mes_welfare_bounds(&[0.37], &one).unwrap();
        assert_eq!((b.lower, b.upper), (0.37, 0.37));

        let eq = NoisePrecision::scalar(vec![0.1, 0.3, 0.2]).unwrap();
        let b = mes_welfare_bounds(&[0.5, 0.5, 0.5], &eq).unwrap();
        assert_eq!(b.lower, b.upper);

        let two = NoisePrecision::scalar(vec![0.02, 0.02]).unwrap();
        let b = mes_welfare_bounds(&[0.6, 0.4], &two).unwrap();
        close(b.lower, 0.6 - (-2.0f64).exp() * 0.2, 1e-15);
        close(b.lower, 0.57293, 5e-6);
        assert_eq!(b.best, 0);
    }

    #[test]
    fn precision_from_counts_drops_endpoint_terms() {
        let g = RuleGrid::from_ratios(&RatioSet::new(vec![0.0, 1.0]).unwrap());
        let c = StratumCounts::new(vec![vec![[50, 0]], vec![[0, 50]]]).unwrap();
        let a = NoisePrecision::from_counts(&g, &c).unwrap();
        assert_eq!(a.rows(), &[vec![0.02], vec![0.02]]);
    }

    #[test]
    fn penalty_upper_examples() {
        assert_eq!(penalty_upper(&NoisePrecision::scalar(vec![0.3]).unwrap(), 0).unwrap(), 0.0);
        let two = NoisePrecision::scalar(vec![0.02, 0.02]).unwrap();
        close(penalty_upper(&two, 0).unwrap(), 0.06065, 5e-6);
        let g = RuleGrid::from_ratios(&RatioSet::new(vec![0.2, 0.6, 0.9]).unwrap());
        let c = StratumCounts::new(vec![vec![[7, 3]], vec![[4, 9]], vec![[2, 11]]]).unwrap();
        let a1 = penalty_upper(&NoisePrecision::from_counts(&g, &c).unwrap(), 1).unwrap();
        let a2 = penalty_upper(&NoisePrecision::from_counts(&g, &c.scaled(2)).unwrap(), 1).unwrap();
        close(a1 / a2, 2f64.sqrt(), 1e-12);
    }

    #[test]
    fn uniform_scalar_examples() {
        assert_eq!(uniform_regret_mes(&NoisePrecision::scalar(vec![0.3]).unwrap()).unwrap().value, 0.0);
        let u = uniform_regret_mes(&NoisePrecision::scalar(vec![0.02, 0.02]).unwrap()).unwrap();
        assert_eq!(u.reference, 0);
        close(u.value, 0.06065, 5e-6);
    }

    fn table_grid(p: f64) -> RuleGrid {
        RuleGrid::new(vec![vec![0.5, 0.5], vec![0.7, 0.3]], PopulationProfile::low_high(p).unwrap()).unwrap()
    }

    // reference-table layout: N10low N11low N20low N21low N10high N11high N20high N21high
    fn table_counts(n: [u64; 8]) -> StratumCounts {
        StratumCounts::new(vec![
            vec![[n[0], n[1]], [n[4], n[5]]],
            vec![[n[2], n[3]], [n[6], n[7]]],
        ])
        .unwrap()
    }

    #[test]
    fn uniform_covariate_reference_rows() {
        let cases = [
            (0.5, [2, 2, 2, 3, 2, 2, 3, 2], 0.145, 5e-4),
            (0.9, [4, 4, 3, 6, 1, 1, 1, 1], 0.136, 5e-4),
            (0.99, [1450, 1450, 870, 2030, 15, 15, 21, 9], 0.00792, 2e-5),
        ];
        for (p, n, expect, tol) in cases {
            let g = table_grid(p);
            let a = NoisePrecision::from_counts(&g, &table_counts(n)).unwrap();
            close(uniform_regret_cmes(&a, g.profile()).unwrap().value, expect, tol);
        }
    }

    #[test]
    fn covariate_bounds_example() {
        let g = table_grid(0.5);
        let a = NoisePrecision::from_counts(&g, &table_counts([2, 2, 2, 3, 2, 2, 3, 2])).unwrap();
        close(a.get(0, 0), 0.25, 1e-15);
        close(a.get(1, 0), 0.2083333333333333, 1e-15);
        close(a.get(1, 1), 0.2083333333333333, 1e-15);
        let b = cmes_welfare_bounds(&[0.7, 0.5], &a, g.profile()).unwrap();
        let s = 0.25 * (0.25 + 0.2083333333333333) * 2.0;
        close(s, 0.22917, 5e-6);
        close(b.lower, 0.7 - (-2.0 * 0.04 / s).exp() * 0.2, 1e-12);
        let eq = cmes_welfare_bounds(&[0.6, 0.6], &a, g.profile()).unwrap();
        assert_eq!(eq.lower, eq.upper);
    }

    #[test]
    fn coarse_bounds_share_the_formula() {
        let g = table_grid(0.5);
        let a = NoisePrecision::from_counts(&g, &table_counts([2, 2, 2, 3, 2, 2, 3, 2])).unwrap();
        let fine = cmes_welfare_bounds(&[0.7, 0.5], &a, g.profile()).unwrap();
        let coarse = coarse_welfare_bounds(&[0.7, 0.5], &a, g.profile()).unwrap();
        assert_eq!(fine.lower, coarse.lower);
        assert_eq!(coarse.partition, Partition::Coarse);
    }

    #[test]
    fn frechet_examples() {
        let one = NoisePrecision::scalar(vec![0.1]).unwrap();
        assert_eq!(frechet_lower_bound(&[0.42], &one, FrechetVariant::Sound).unwrap(), 0.42);
        let exact = NoisePrecision::scalar(vec![0.0, 0.0]).unwrap();
        assert_eq!(frechet_lower_bound(&[0.6, 0.4], &exact, FrechetVariant::Sound).unwrap(), 0.6);
        let two = NoisePrecision::scalar(vec![0.02, 0.02]).unwrap();
        let v = frechet_lower_bound(&[0.6, 0.4], &two, FrechetVariant::Sound).unwrap();
        close(v, (1.0 - (-2.0f64).exp()) * 0.6, 1e-15);
        close(v, 0.51880, 5e-6);
        // the as-written form overshoots the welfare ceiling
        assert!(frechet_lower_bound(&[0.6, 0.4], &two, FrechetVariant::AllArms).unwrap() > 0.6);
    }

    #[test]
    fn gap_identity_is_zero() {
        let c = Coarsening::identity(table_grid(0.9));
        assert_eq!(conditioning_gap(&c).unwrap().value, 0.0);
    }

    #[test]
    fn gap_exposure_matched_reference_values() {
        for (p, expect) in [(0.9, 0.072), (0.99, 0.00792)] {
            let c = Coarsening::exposure_matched(table_grid(p), vec![0, 0]).unwrap();
            assert_eq!(c.coarse().len(), 2);
            close(conditioning_gap(&c).unwrap().value, expect, 1e-12);
        }
    }

    #[test]
    fn gap_upper_with_exact_estimates_equals_gap() {
        let c = Coarsening::exposure_matched(table_grid(0.9), vec![0, 0]).unwrap();
        let zero = NoisePrecision::new(vec![vec![0.0]; 2]).unwrap();
        assert_eq!(
            conditioning_gap_upper(&c, &zero).unwrap().value,
            conditioning_gap(&c).unwrap().value
        );
    }

    #[test]
    fn gap_upper_identity_is_max_penalty() {
        let g = table_grid(0.5);
        let a = NoisePrecision::from_counts(&g, &table_counts([2, 2, 2, 3, 2, 2, 3, 2])).unwrap();
        let c = Coarsening::identity(g.clone());
        let h = conditioning_gap_upper(&c, &a).unwrap().value;
        assert!(h > 0.0);
        // the witness attains it and no bound exceeds the envelope
        let u = crate::model::grid_welfares(&g, &conditioning_gap_upper(&c, &a).unwrap().witness).unwrap();
        close(cmes_welfare_bounds(&u, &a, g.profile()).unwrap().penalty, h, 1e-12);
        assert!(h <= penalty_upper_weighted(&a, g.profile(), 0).unwrap().max(penalty_upper_weighted(&a, g.profile(), 1).unwrap()));
    }

    #[test]
    fn coarsening_validation() {
        let fine = table_grid(0.5);
        let coarse = RuleGrid::new(vec![vec![0.5]], PopulationProfile::single()).unwrap();
        assert!(Coarsening::new(fine.clone(), vec![0, 0], coarse.clone()).is_ok());
        assert!(Coarsening::new(fine.clone(), vec![0], coarse.clone()).is_err());
        assert!(Coarsening::new(fine, vec![0, 1], coarse).is_err());
    }
}
