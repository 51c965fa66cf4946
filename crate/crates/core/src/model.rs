//! Domain types shared by every other module, plus the population-side
//! welfare and regret functions.
//!
//! Treatment fractions are the decision variable. A rule assigns one fraction
//! to each covariate cell, and outcomes depend on other people's treatment only
//! through the population-wide *exposure* `p'π`. [`StateOfNature`] is keyed by
//! that exposure, so two rules with the same exposure read the same means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when matching exposures or rule vectors.
pub const EXPOSURE_TOL: f64 = 1e-12;
/// Tolerance on probability vectors summing to one.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Treatment {
    Control,
    Treated,
}

impl Treatment {
    pub const BOTH: [Treatment; 2] = [Treatment::Control, Treatment::Treated];

    pub fn index(self) -> usize {
        match self {
            Treatment::Control => 0,
            Treatment::Treated => 1,
        }
    }

    pub fn from_index(t: usize) -> Result<Self> {
        match t {
            0 => Ok(Treatment::Control),
            1 => Ok(Treatment::Treated),
            other => Err(Error::invalid(format!("treatment must be 0 or 1, got {other}"))),
        }
    }

    /// Weight of this treatment's mean in the welfare of a cell treated at
    /// fraction `ratio`.
    pub fn weight(self, ratio: f64) -> f64 {
        match self {
            Treatment::Control => 1.0 - ratio,
            Treatment::Treated => ratio,
        }
    }
}

fn check_fraction(x: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!("{what} {x} is outside [0, 1]")));
    }
    Ok(())
}

/// Finite, strictly increasing set of candidate treatment fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RatioSet {
    ratios: Vec<f64>,
}

impl RatioSet {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if ratios.is_empty() {
            return Err(Error::invalid("ratio set is empty"));
        }
        for &r in &ratios {
            check_fraction(r, "ratio")?;
        }
        if ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("ratios must be strictly increasing"));
        }
        Ok(RatioSet { ratios })
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }
}

impl TryFrom<Vec<f64>> for RatioSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        RatioSet::new(v)
    }
}

impl From<RatioSet> for Vec<f64> {
    fn from(r: RatioSet) -> Self {
        r.ratios
    }
}

/// Covariate cells and their population probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileRepr")]
pub struct PopulationProfile {
    cells: Vec<String>,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileRepr {
    cells: Vec<String>,
    probs: Vec<f64>,
}

impl TryFrom<ProfileRepr> for PopulationProfile {
    type Error = Error;
    fn try_from(r: ProfileRepr) -> Result<Self> {
        PopulationProfile::new(r.cells, r.probs)
    }
}

impl PopulationProfile {
    pub fn new(cells: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::invalid("profile needs at least one cell"));
        }
        if cells.len() != probs.len() {
            return Err(Error::invalid(format!(
                "{} cell labels but {} probabilities",
                cells.len(),
                probs.len()
            )));
        }
        for (i, a) in cells.iter().enumerate() {
            if cells[..i].contains(a) {
                return Err(Error::invalid(format!("duplicate cell label {a:?}")));
            }
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("cell probabilities must be nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::invalid(format!("cell probabilities sum to {total}, not 1")));
        }
        Ok(PopulationProfile { cells, probs })
    }

    /// The degenerate profile with one cell holding the whole population.
    pub fn single() -> Self {
        PopulationProfile {
            cells: vec!["all".to_string()],
            probs: vec![1.0],
        }
    }

    /// Two cells, `low` and `high`, with `Pr(low) = p_low`.
    pub fn low_high(p_low: f64) -> Result<Self> {
        check_fraction(p_low, "Pr(low)")?;
        Self::new(vec!["low".into(), "high".into()], vec![p_low, 1.0 - p_low])
    }

    pub fn cells(&self) -> &[String] {
        &self.cells
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.cells.iter().position(|c| c == label)
    }

    /// Overall treated fraction `p'π` of a rule vector.
    pub fn exposure(&self, rule: &[f64]) -> f64 {
        self.probs.iter().zip(rule).map(|(p, r)| p * r).sum()
    }
}

/// Finite set of rule vectors, one treatment fraction per covariate cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr")]
pub struct RuleGrid {
    vectors: Vec<Vec<f64>>,
    profile: PopulationProfile,
    #[serde(skip_deserializing)]
    exposures: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRepr {
    vectors: Vec<Vec<f64>>,
    profile: PopulationProfile,
    #[serde(default)]
    #[allow(dead_code)]
    exposures: Option<Vec<f64>>,
}

impl TryFrom<GridRepr> for RuleGrid {
    type Error = Error;
    fn try_from(r: GridRepr) -> Result<Self> {
        RuleGrid::new(r.vectors, r.profile)
    }
}

impl RuleGrid {
    pub fn new(vectors: Vec<Vec<f64>>, profile: PopulationProfile) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::invalid("rule grid is empty"));
        }
        for v in &vectors {
            if v.len() != profile.len() {
                return Err(Error::invalid(format!(
                    "rule {v:?} has {} components for {} cells",
                    v.len(),
                    profile.len()
                )));
            }
            for &r in v {
                check_fraction(r, "rule component")?;
            }
        }
        for (i, a) in vectors.iter().enumerate() {
            if vectors[..i].iter().any(|b| same_rule(a, b)) {
                return Err(Error::invalid(format!("duplicate rule {a:?}")));
            }
        }
        let exposures: Vec<f64> = vectors.iter().map(|v| profile.exposure(v)).collect();
        // Floating error can push p'π a hair outside [0,1].
        if exposures.iter().any(|&e| !(-EXPOSURE_TOL..=1.0 + EXPOSURE_TOL).contains(&e)) {
            return Err(Error::invalid("rule exposure outside [0, 1]"));
        }
        let exposures = exposures.into_iter().map(|e| e.clamp(0.0, 1.0)).collect();
        Ok(RuleGrid {
            vectors,
            profile,
            exposures,
        })
    }

    /// Single-cell grid whose rules are the scalar ratios of `ratios`.
    pub fn from_ratios(ratios: &RatioSet) -> Self {
        RuleGrid::new(
            ratios.ratios().iter().map(|&r| vec![r]).collect(),
            PopulationProfile::single(),
        )
        .expect("a ratio set always forms a valid single-cell grid")
    }

    /// Every vector in `ratios^L`, in lexicographic order of ratio indices.
    pub fn product(ratios: &RatioSet, profile: PopulationProfile) -> Self {
        let k = ratios.len();
        let l = profile.len();
        let total = k.pow(l as u32);
        let vectors = (0..total)
            .map(|mut idx| {
                let mut v = vec![0.0; l];
                for slot in v.iter_mut().rev() {
                    *slot = ratios.ratios()[idx % k];
                    idx /= k;
                }
                v
            })
            .collect();
        RuleGrid::new(vectors, profile).expect("product of a ratio set is a valid grid")
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.profile.len()
    }

    pub fn rules(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn rule(&self, k: usize) -> &[f64] {
        &self.vectors[k]
    }

    pub fn exposure(&self, k: usize) -> f64 {
        self.exposures[k]
    }

    pub fn exposures(&self) -> &[f64] {
        &self.exposures
    }

    pub fn profile(&self) -> &PopulationProfile {
        &self.profile
    }

    pub fn position(&self, rule: &[f64]) -> Option<usize> {
        self.vectors.iter().position(|v| same_rule(v, rule))
    }
}

pub(crate) fn same_rule(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= EXPOSURE_TOL)
}

/// One stored mean of a state of nature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanEntry {
    pub treatment: u8,
    pub cell: usize,
    pub exposure: f64,
    pub mean: f64,
}

/// Table of mean potential outcomes `E[Y_t(exposure) | cell]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateRepr", into = "StateRepr")]
pub struct StateOfNature {
    cells: usize,
    // [treatment][cell] -> (exposure, mean) sorted by exposure
    table: [Vec<Vec<(f64, f64)>>; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRepr {
    cells: usize,
    means: Vec<MeanEntry>,
}

impl TryFrom<StateRepr> for StateOfNature {
    type Error = Error;
    fn try_from(r: StateRepr) -> Result<Self> {
        let mut s = StateOfNature::new(r.cells)?;
        for e in r.means {
            s.insert(Treatment::from_index(e.treatment as usize)?, e.cell, e.exposure, e.mean)?;
        }
        Ok(s)
    }
}

impl From<StateOfNature> for StateRepr {
    fn from(s: StateOfNature) -> Self {
        StateRepr {
            cells: s.cells,
            means: s.entries().collect(),
        }
    }
}

impl StateOfNature {
    pub fn new(cells: usize) -> Result<Self> {
        if cells == 0 {
            return Err(Error::invalid("state needs at least one cell"));
        }
        Ok(StateOfNature {
            cells,
            table: [vec![Vec::new(); cells], vec![Vec::new(); cells]],
        })
    }

    /// Builds a state over every (treatment, cell, exposure) a grid reaches.
    pub fn from_fn(grid: &RuleGrid, mut f: impl FnMut(Treatment, usize, f64) -> f64) -> Result<Self> {
        let mut s = StateOfNature::new(grid.cells())?;
        for &e in grid.exposures() {
            for l in 0..grid.cells() {
                for t in Treatment::BOTH {
                    if s.mean(t, l, e).is_err() {
                        s.insert(t, l, e, f(t, l, e))?;
                    }
                }
            }
        }
        Ok(s)
    }

    /// Inserts or overwrites a mean.
    pub fn insert(&mut self, t: Treatment, cell: usize, exposure: f64, mean: f64) -> Result<()> {
        if cell >= self.cells {
            return Err(Error::invalid(format!("cell {cell} out of range for {} cells", self.cells)));
        }
        check_fraction(exposure, "exposure")?;
        check_fraction(mean, "mean")?;
        let row = &mut self.table[t.index()][cell];
        match row.iter().position(|(e, _)| (e - exposure).abs() <= EXPOSURE_TOL) {
            Some(i) => row[i].1 = mean,
            None => {
                let at = row.partition_point(|(e, _)| *e < exposure);
                row.insert(at, (exposure, mean));
            }
        }
        Ok(())
    }

    pub fn mean(&self, t: Treatment, cell: usize, exposure: f64) -> Result<f64> {
        let missing = || Error::MissingMean {
            treatment: t.index() as u8,
            cell,
            exposure,
        };
        let row = self.table[t.index()].get(cell).ok_or_else(missing)?;
        let at = row.partition_point(|(e, _)| *e < exposure - EXPOSURE_TOL);
        match row.get(at) {
            Some(&(e, m)) if (e - exposure).abs() <= EXPOSURE_TOL => Ok(m),
            _ => Err(missing()),
        }
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn entries(&self) -> impl Iterator<Item = MeanEntry> + '_ {
        Treatment::BOTH.into_iter().flat_map(move |t| {
            self.table[t.index()].iter().enumerate().flat_map(move |(cell, row)| {
                row.iter().map(move |&(exposure, mean)| MeanEntry {
                    treatment: t.index() as u8,
                    cell,
                    exposure,
                    mean,
                })
            })
        })
    }

    /// Same state with every mean multiplied by `factor` in [0, 1].
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        check_fraction(factor, "scale factor")?;
        let mut out = self.clone();
        for side in out.table.iter_mut() {
            for row in side.iter_mut() {
                for (_, m) in row.iter_mut() {
                    *m *= factor;
                }
            }
        }
        Ok(out)
    }
}

/// Counts `N_{ktl}` indexed by arm, cell and treatment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCounts {
    // [arm][cell][treatment]
    counts: Vec<Vec<[u64; 2]>>,
}

impl StratumCounts {
    /// Counts laid out as `counts[arm][cell] = [N_control, N_treated]`.
    pub fn new(counts: Vec<Vec<[u64; 2]>>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("no arms in stratum counts"));
        }
        let cells = counts[0].len();
        if cells == 0 || counts.iter().any(|a| a.len() != cells) {
            return Err(Error::invalid("every arm needs the same positive number of cells"));
        }
        Ok(StratumCounts { counts })
    }

    /// Checks shape against a grid and that every stratum with a nonzero
    /// welfare weight is populated.
    pub fn validate(&self, grid: &RuleGrid) -> Result<()> {
        if self.arms() != grid.len() || self.cells() != grid.cells() {
            return Err(Error::invalid(format!(
                "counts are {}x{} (arms x cells) but the grid is {}x{}",
                self.arms(),
                self.cells(),
                grid.len(),
                grid.cells()
            )));
        }
        for (k, rule) in grid.rules().iter().enumerate() {
            for (l, &r) in rule.iter().enumerate() {
                for t in Treatment::BOTH {
                    if t.weight(r) > 0.0 && self.get(k, l, t) == 0 {
                        return Err(Error::EmptyStratum {
                            arm: k,
                            cell: l,
                            treatment: t.index() as u8,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, arm: usize, cell: usize, t: Treatment) -> u64 {
        self.counts[arm][cell][t.index()]
    }

    pub fn set(&mut self, arm: usize, cell: usize, t: Treatment, n: u64) {
        self.counts[arm][cell][t.index()] = n;
    }

    pub fn arms(&self) -> usize {
        self.counts.len()
    }

    pub fn cells(&self) -> usize {
        self.counts[0].len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().flatten().sum()
    }

    pub fn arm_total(&self, arm: usize) -> u64 {
        self.counts[arm].iter().flatten().sum()
    }

    pub fn as_nested(&self) -> &[Vec<[u64; 2]>] {
        &self.counts
    }

    /// Every count multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        StratumCounts {
            counts: self
                .counts
                .iter()
                .map(|a| a.iter().map(|c| [c[0] * factor, c[1] * factor]).collect())
                .collect(),
        }
    }
}

/// Running count, sum and sum of squares of one stratum's outcomes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl StratumStats {
    pub fn push(&mut self, y: f64) {
        self.count += 1;
        self.sum += y;
        self.sum_sq += y * y;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    /// Plug-in (divide by n) variance.
    pub fn variance(&self) -> Option<f64> {
        let m = self.mean()?;
        Some((self.sum_sq / self.count as f64 - m * m).max(0.0))
    }
}

/// Outcomes observed in one experimental arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSample {
    /// Rule vector (one fraction per cell) the arm was run under.
    pub rule: Vec<f64>,
    /// `strata[cell][treatment]` lists outcomes in [0, 1].
    pub strata: Vec<[Vec<f64>; 2]>,
}

impl ArmSample {
    pub fn new(rule: Vec<f64>) -> Self {
        let cells = rule.len();
        ArmSample {
            rule,
            strata: vec![[Vec::new(), Vec::new()]; cells],
        }
    }

    pub fn push(&mut self, cell: usize, t: Treatment, y: f64) -> Result<()> {
        check_fraction(y, "outcome")?;
        let stratum = self
            .strata
            .get_mut(cell)
            .ok_or_else(|| Error::invalid(format!("cell {cell} out of range")))?;
        stratum[t.index()].push(y);
        Ok(())
    }
}

/// Per-individual `(treatment, outcome)` records grouped by arm and cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSample {
    arms: Vec<ArmSample>,
}

impl ExperimentSample {
    pub fn new(arms: Vec<ArmSample>) -> Result<Self> {
        if arms.is_empty() {
            return Err(Error::invalid("sample has no arms"));
        }
        let cells = arms[0].rule.len();
        for arm in &arms {
            if arm.rule.len() != cells || arm.strata.len() != cells {
                return Err(Error::invalid("arms disagree on the number of cells"));
            }
            for &r in &arm.rule {
                check_fraction(r, "arm ratio")?;
            }
            for y in arm.strata.iter().flatten().flatten() {
                if !(0.0..=1.0).contains(y) {
                    return Err(Error::invalid(format!("outcome {y} is outside [0, 1]")));
                }
            }
        }
        Ok(ExperimentSample { arms })
    }

    pub fn arms(&self) -> &[ArmSample] {
        &self.arms
    }

    pub fn cells(&self) -> usize {
        self.arms[0].rule.len()
    }

    pub fn summary(&self) -> SampleSummary {
        SampleSummary {
            arms: self
                .arms
                .iter()
                .map(|a| ArmSummary {
                    rule: a.rule.clone(),
                    strata: a
                        .strata
                        .iter()
                        .map(|s| {
                            let mut out = [StratumStats::default(); 2];
                            for (stats, ys) in out.iter_mut().zip(s) {
                                ys.iter().for_each(|&y| stats.push(y));
                            }
                            out
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn counts(&self) -> StratumCounts {
        self.summary().counts()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub rule: Vec<f64>,
    /// `strata[cell][treatment]`
    pub strata: Vec<[StratumStats; 2]>,
}

/// Sufficient statistics of an [`ExperimentSample`]; every estimator works on
/// this form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub arms: Vec<ArmSummary>,
}

impl SampleSummary {
    pub fn cells(&self) -> usize {
        self.arms.first().map_or(0, |a| a.rule.len())
    }

    pub fn counts(&self) -> StratumCounts {
        StratumCounts {
            counts: self
                .arms
                .iter()
                .map(|a| a.strata.iter().map(|s| [s[0].count, s[1].count]).collect())
                .collect(),
        }
    }

    /// Index of the arm run under `rule`.
    pub fn arm_for(&self, rule: &[f64]) -> Option<usize> {
        self.arms.iter().position(|a| same_rule(&a.rule, rule))
    }
}

/// `U_l(π, θ) = (1-π) E[Y_0(π̄)|l] + π E[Y_1(π̄)|l]`, dropping zero-weight terms.
fn cell_welfare(ratio: f64, exposure: f64, theta: &StateOfNature, cell: usize) -> Result<f64> {
    let mut u = 0.0;
    for t in Treatment::BOTH {
        let w = t.weight(ratio);
        if w > 0.0 {
            u += w * theta.mean(t, cell, exposure)?;
        }
    }
    Ok(u)
}

/// Welfare `U(π, θ)` of treating fraction `pi` of the population.
///
/// With `cell = Some(l)` this is the cell-conditional welfare with exposure
/// `pi`; with `None` the state must have a single cell.
pub fn population_welfare(pi: f64, theta: &StateOfNature, cell: Option<usize>) -> Result<f64> {
    check_fraction(pi, "ratio")?;
    let cell = match cell {
        Some(l) => l,
        None if theta.cells() == 1 => 0,
        None => {
            return Err(Error::invalid(
                "state has several cells; pass a cell index or use grid_welfare",
            ))
        }
    };
    cell_welfare(pi, pi, theta, cell)
}

/// Population welfare of a rule vector: `Σ_l p_l U_l(π, θ)`.
pub fn grid_welfare(rule: &[f64], theta: &StateOfNature, profile: &PopulationProfile) -> Result<f64> {
    if rule.len() != profile.len() {
        return Err(Error::invalid("rule length does not match profile"));
    }
    let exposure = profile.exposure(rule).clamp(0.0, 1.0);
    let mut u = 0.0;
    for (l, (&p, &r)) in profile.probs().iter().zip(rule).enumerate() {
        if p > 0.0 {
            u += p * cell_welfare(r, exposure, theta, l)?;
        }
    }
    Ok(u)
}

/// Welfare of every rule in a grid.
pub fn grid_welfares(grid: &RuleGrid, theta: &StateOfNature) -> Result<Vec<f64>> {
    grid.rules()
        .iter()
        .map(|r| grid_welfare(r, theta, grid.profile()))
        .collect()
}

/// Regret of a (possibly randomized) choice given each rule's welfare.
pub fn regret_from_welfares(choice: &[f64], welfares: &[f64]) -> Result<f64> {
    if choice.len() != welfares.len() || welfares.is_empty() {
        return Err(Error::invalid("choice distribution and welfares differ in length"));
    }
    if choice.iter().any(|&q| !(q >= 0.0)) {
        return Err(Error::invalid("choice probabilities must be nonnegative"));
    }
    let total: f64 = choice.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("choice probabilities sum to {total}")));
    }
    let best = welfares.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let achieved: f64 = choice.iter().zip(welfares).map(|(q, u)| q * u).sum();
    Ok((best - achieved).max(0.0))
}

/// `max_k U(π_k, θ) - Σ_k Pr(choice = k) U(π_k, θ)`.
pub fn oracle_regret(choice: &[f64], theta: &StateOfNature, grid: &RuleGrid) -> Result<f64> {
    regret_from_welfares(choice, &grid_welfares(grid, theta)?)
}
