//! Seeded simulation of saturation experiments, exact small-sample oracles,
//! and empirical checks of the regret bounds.
//!
//! Replication `r` of a run with master seed `s` draws from ChaCha8 seeded
//! with `s` on stream `r`, so every replication is reproducible on its own
//! and results do not depend on how replications are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{cmes_welfare_bounds, mes_welfare_bounds, uniform_regret_cmes, NoisePrecision};
use crate::error::{Error, Result};
use crate::estimators::{
    argmax_with_tie, cmes_choose, estimate_grid, mes_choose, plugin_choose, vmes_vectorize, vmes_winner,
    CellWeights,
};
use crate::model::{
    grid_welfares, ArmSample, ArmSummary, ExperimentSample, RatioSet, RuleGrid, SampleSummary, StateOfNature,
    StratumCounts, StratumStats, Treatment,
};

/// Standard-error multiplier used when comparing simulated welfare to bounds.
pub const SE_MULTIPLIER: f64 = 3.0;

/// Largest number of outcome configurations [`exact_rule_welfare`] visits.
pub const MAX_EXACT_CONFIGURATIONS: u128 = 1 << 26;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum OutcomeFamily {
    /// Outcomes in {0, 1} with the state's means as success probabilities.
    #[default]
    Bernoulli,
    /// Normal draws clipped to [0, 1]. Clipping moves the mean away from the
    /// state's value unless the mean is far from both ends.
    ClippedGaussian { sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub grid: RuleGrid,
    pub state: StateOfNature,
    pub counts: StratumCounts,
    #[serde(default)]
    pub outcome: OutcomeFamily,
    pub replications: u64,
    pub seed: u64,
}

/// Decision rule evaluated by simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Scalar empirical success; the grid must have a single cell.
    Mes,
    /// Covariate empirical success with the given cell weights.
    Cmes(CellWeights),
    /// Pairwise studentized comparisons.
    PlugIn,
    /// Always the rule at this index.
    Fixed(usize),
}

/// What one replication of a rule produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub chosen: Option<usize>,
    pub tie: bool,
}

impl SimulationConfig {
    pub fn new(
        grid: RuleGrid,
        state: StateOfNature,
        counts: StratumCounts,
        outcome: OutcomeFamily,
        replications: u64,
        seed: u64,
    ) -> Result<Self> {
        let config = SimulationConfig {
            grid,
            state,
            counts,
            outcome,
            replications,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        if let OutcomeFamily::ClippedGaussian { sd } = self.outcome {
            if !(sd >= 0.0) || !sd.is_finite() {
                return Err(Error::invalid("Gaussian sd must be finite and nonnegative"));
            }
        }
        if self.state.cells() != self.grid.cells() {
            return Err(Error::invalid("state and grid disagree on cells"));
        }
        self.counts.validate(&self.grid)?;
        self.stratum_means().map(|_| ())
    }

    /// `means[arm][cell][t]` for every stratum with a positive count.
    pub fn stratum_means(&self) -> Result<Vec<Vec<[Option<f64>; 2]>>> {
        (0..self.grid.len())
            .map(|k| {
                let e = self.grid.exposure(k);
                (0..self.grid.cells())
                    .map(|l| {
                        let mut out = [None, None];
                        for t in Treatment::BOTH {
                            if self.counts.get(k, l, t) > 0 {
                                out[t.index()] = Some(self.state.mean(t, l, e)?);
                            }
                        }
                        Ok(out)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn with_replications(&self, replications: u64) -> Self {
        SimulationConfig {
            replications,
            ..self.clone()
        }
    }
}

fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

enum Stratum {
    Bernoulli { n: u64, ones: u64 },
    Values(Vec<f64>),
}

fn draw_strata(config: &SimulationConfig, means: &[Vec<[Option<f64>; 2]>], rep: u64) -> Result<Vec<Vec<[Stratum; 2]>>> {
    let mut rng = replication_rng(config.seed, rep);
    let mut out = Vec::with_capacity(means.len());
    for (k, arm) in means.iter().enumerate() {
        let mut cells = Vec::with_capacity(arm.len());
        for (l, cell) in arm.iter().enumerate() {
            let mut pair = [Stratum::Values(Vec::new()), Stratum::Values(Vec::new())];
            for t in Treatment::BOTH {
                let n = config.counts.get(k, l, t);
                let Some(m) = cell[t.index()] else { continue };
                pair[t.index()] = match config.outcome {
                    OutcomeFamily::Bernoulli => {
                        let dist = Binomial::new(n, m).map_err(|e| Error::invalid(format!("mean {m}: {e}")))?;
                        Stratum::Bernoulli {
                            n,
                            ones: dist.sample(&mut rng),
                        }
                    }
                    OutcomeFamily::ClippedGaussian { sd } => {
                        let dist = Normal::new(m, sd).map_err(|e| Error::invalid(format!("sd {sd}: {e}")))?;
                        Stratum::Values((0..n).map(|_| dist.sample(&mut rng).clamp(0.0, 1.0)).collect())
                    }
                };
            }
            cells.push(pair);
        }
        out.push(cells);
    }
    Ok(out)
}

fn stats_of(s: &Stratum) -> StratumStats {
    match *s {
        Stratum::Bernoulli { n, ones } => StratumStats {
            count: n,
            sum: ones as f64,
            sum_sq: ones as f64,
        },
        Stratum::Values(ref ys) => {
            let mut st = StratumStats::default();
            ys.iter().for_each(|&y| st.push(y));
            st
        }
    }
}

fn values_of(s: &Stratum) -> Vec<f64> {
    match *s {
        Stratum::Bernoulli { n, ones } => {
            let mut v = vec![1.0; ones as usize];
            v.resize(n as usize, 0.0);
            v
        }
        Stratum::Values(ref ys) => ys.clone(),
    }
}

/// Sufficient statistics of replication `rep`; identical to
/// `simulate_sample(config, rep)?.summary()`.
pub fn simulate_summary(config: &SimulationConfig, rep: u64) -> Result<SampleSummary> {
    let means = config.stratum_means()?;
    summary_with_means(config, &means, rep)
}

fn summary_with_means(config: &SimulationConfig, means: &[Vec<[Option<f64>; 2]>], rep: u64) -> Result<SampleSummary> {
    let strata = draw_strata(config, means, rep)?;
    Ok(SampleSummary {
        arms: strata
            .iter()
            .zip(config.grid.rules())
            .map(|(cells, rule)| ArmSummary {
                rule: rule.clone(),
                strata: cells.iter().map(|c| [stats_of(&c[0]), stats_of(&c[1])]).collect(),
            })
            .collect(),
    })
}

/// Individual records of replication `rep`. Bernoulli strata list their
/// successes first.
pub fn simulate_sample(config: &SimulationConfig, rep: u64) -> Result<ExperimentSample> {
    let means = config.stratum_means()?;
    let strata = draw_strata(config, &means, rep)?;
    let arms = strata
        .iter()
        .zip(config.grid.rules())
        .map(|(cells, rule)| ArmSample {
            rule: rule.clone(),
            strata: cells.iter().map(|c| [values_of(&c[0]), values_of(&c[1])]).collect(),
        })
        .collect();
    ExperimentSample::new(arms)
}

fn scalar_ratios(grid: &RuleGrid) -> Result<(RatioSet, Vec<usize>)> {
    if grid.cells() != 1 {
        return Err(Error::invalid("the scalar rule needs a single-cell grid"));
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid.rule(a)[0].total_cmp(&grid.rule(b)[0]));
    let ratios = RatioSet::new(order.iter().map(|&k| grid.rule(k)[0]).collect())?;
    Ok((ratios, order))
}

/// Applies `rule` to one sample summary. Estimation failures (such as an
/// empty stratum or an undefined studentizer) give `chosen = None`.
pub fn apply_rule(rule: Rule, summary: &SampleSummary, grid: &RuleGrid) -> Result<Draw> {
    let failed = Draw { chosen: None, tie: false };
    Ok(match rule {
        Rule::Fixed(k) => {
            if k >= grid.len() {
                return Err(Error::invalid(format!("fixed rule {k} is outside the grid")));
            }
            Draw {
                chosen: Some(k),
                tie: false,
            }
        }
        Rule::Mes => {
            let (ratios, order) = scalar_ratios(grid)?;
            match mes_choose(summary, &ratios) {
                Ok(d) => Draw {
                    chosen: Some(order[d.chosen]),
                    tie: d.tie,
                },
                Err(_) => failed,
            }
        }
        Rule::Cmes(w) => match cmes_choose(summary, grid, w) {
            Ok(d) => Draw {
                chosen: Some(d.chosen),
                tie: d.tie,
            },
            Err(_) => failed,
        },
        Rule::PlugIn => match estimate_grid(summary, grid, CellWeights::Population) {
            Ok(est) => Draw {
                chosen: plugin_choose(summary, grid, &est),
                tie: false,
            },
            Err(_) => failed,
        },
    })
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean and standard error of the mean, summed in order with compensation.
pub fn mean_and_se(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    // Summing deviations from the first value keeps constant inputs exact.
    let Some(shift) = xs.clone().next() else {
        return (f64::NAN, f64::NAN);
    };
    let mut s = CompensatedSum::default();
    let mut n = 0u64;
    for x in xs.clone() {
        s.add(x - shift);
        n += 1;
    }
    let mean = shift + s.value() / n as f64;
    let mut ss = CompensatedSum::default();
    for x in xs {
        ss.add((x - mean) * (x - mean));
    }
    let se = if n > 1 {
        (ss.value() / (n - 1) as f64 / n as f64).sqrt()
    } else {
        0.0
    };
    (mean, se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub rule: Rule,
    pub replications: u64,
    pub seed: u64,
    /// True welfare of every grid rule in the simulated state.
    pub welfares: Vec<f64>,
    /// Share of successful replications choosing each rule.
    pub frequencies: Vec<f64>,
    pub welfare: f64,
    pub welfare_se: f64,
    pub regret: f64,
    pub regret_se: f64,
    pub failures: u64,
    pub ties: u64,
}

impl SimulationReport {
    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / self.replications as f64
    }
}

/// Runs every replication of `config` under `rule` and returns the draws in
/// replication order.
pub fn run_replications(config: &SimulationConfig, rule: Rule) -> Result<Vec<Draw>> {
    config.validate()?;
    let means = config.stratum_means()?;
    (0..config.replications)
        .into_par_iter()
        .map(|rep| apply_rule(rule, &summary_with_means(config, &means, rep)?, &config.grid))
        .collect()
}

/// Monte Carlo estimate of expected welfare and regret of `rule`.
pub fn rule_performance(config: &SimulationConfig, rule: Rule) -> Result<SimulationReport> {
    let welfares = grid_welfares(&config.grid, &config.state)?;
    let draws = run_replications(config, rule)?;
    let top = welfares.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let chosen: Vec<usize> = draws.iter().filter_map(|d| d.chosen).collect();
    let failures = config.replications - chosen.len() as u64;
    let ties = draws.iter().filter(|d| d.tie).count() as u64;
    let mut freq = vec![0u64; welfares.len()];
    chosen.iter().for_each(|&k| freq[k] += 1);
    let ok = chosen.len().max(1) as f64;
    let (welfare, welfare_se) = mean_and_se(chosen.iter().map(|&k| welfares[k]));
    let (regret, regret_se) = mean_and_se(chosen.iter().map(|&k| top - welfares[k]));
    Ok(SimulationReport {
        rule,
        replications: config.replications,
        seed: config.seed,
        frequencies: freq.iter().map(|&c| c as f64 / ok).collect(),
        welfares,
        welfare,
        welfare_se,
        regret,
        regret_se,
        failures,
        ties,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub rule: Rule,
    pub lower: f64,
    pub upper: f64,
    pub welfare: f64,
    pub welfare_se: f64,
    pub regret: f64,
    pub uniform_regret_upper: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
    pub regret_ok: bool,
    pub failures: u64,
}

impl BoundCheck {
    pub fn passed(&self) -> bool {
        self.lower_ok && self.upper_ok && self.regret_ok && self.failures == 0
    }
}

/// Compares simulated welfare of the empirical success rule with its
/// finite-sample sandwich, and simulated regret with the uniform bound,
/// each with [`SE_MULTIPLIER`] standard errors of slack.
///
/// Single-cell grids are checked against the scalar bounds, others against
/// the covariate bounds.
pub fn verify_bounds(config: &SimulationConfig) -> Result<BoundCheck> {
    let precisions = NoisePrecision::from_counts(&config.grid, &config.counts)?;
    let welfares = grid_welfares(&config.grid, &config.state)?;
    let (rule, bounds) = if config.grid.cells() == 1 {
        (Rule::Mes, mes_welfare_bounds(&welfares, &precisions)?)
    } else {
        (
            Rule::Cmes(CellWeights::Population),
            cmes_welfare_bounds(&welfares, &precisions, config.grid.profile())?,
        )
    };
    let uniform = uniform_regret_cmes(&precisions, config.grid.profile())?.value;
    let report = rule_performance(config, rule)?;
    let slack = SE_MULTIPLIER * report.welfare_se;
    Ok(BoundCheck {
        rule,
        lower: bounds.lower,
        upper: bounds.upper,
        welfare: report.welfare,
        welfare_se: report.welfare_se,
        regret: report.regret,
        uniform_regret_upper: uniform,
        lower_ok: report.welfare >= bounds.lower - slack,
        upper_ok: report.welfare <= bounds.upper + slack,
        regret_ok: report.regret <= uniform + SE_MULTIPLIER * report.regret_se,
        failures: report.failures,
    })
}

fn binomial_pmf(n: u64, p: f64) -> Vec<f64> {
    let mut coef = 1.0;
    (0..=n)
        .map(|s| {
            if s > 0 {
                coef = coef * (n - s + 1) as f64 / s as f64;
            }
            coef * p.powi(s as i32) * (1.0 - p).powi((n - s) as i32)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactReport {
    pub welfare: f64,
    pub regret: f64,
    /// Probability that the rule is undefined on the realized sample.
    pub failure_probability: f64,
}

/// Expected welfare of `rule` under Bernoulli outcomes, by enumerating every
/// combination of per-stratum success counts.
///
/// Welfare and regret are conditional on the rule being defined.
pub fn exact_rule_welfare(config: &SimulationConfig, rule: Rule) -> Result<ExactReport> {
    if config.outcome != OutcomeFamily::Bernoulli {
        return Err(Error::invalid("exact enumeration needs Bernoulli outcomes"));
    }
    let means = config.stratum_means()?;
    let welfares = grid_welfares(&config.grid, &config.state)?;
    let top = welfares.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // (arm, cell, t, pmf)
    let mut strata = Vec::new();
    for (k, arm) in means.iter().enumerate() {
        for (l, cell) in arm.iter().enumerate() {
            for t in Treatment::BOTH {
                if let Some(m) = cell[t.index()] {
                    strata.push((k, l, t, binomial_pmf(config.counts.get(k, l, t), m)));
                }
            }
        }
    }
    let configurations: u128 = strata.iter().map(|s| s.3.len() as u128).product();
    if configurations > MAX_EXACT_CONFIGURATIONS {
        return Err(Error::invalid(format!(
            "{configurations} outcome configurations exceed the enumeration limit"
        )));
    }
    let mut summary = SampleSummary {
        arms: config
            .grid
            .rules()
            .iter()
            .map(|r| ArmSummary {
                rule: r.clone(),
                strata: vec![[StratumStats::default(); 2]; config.grid.cells()],
            })
            .collect(),
    };
    for &(k, l, t, ref pmf) in &strata {
        summary.arms[k].strata[l][t.index()].count = pmf.len() as u64 - 1;
    }
    let mut ones = vec![0usize; strata.len()];
    let mut welfare = CompensatedSum::default();
    let mut regret = CompensatedSum::default();
    let mut defined = CompensatedSum::default();
    loop {
        let mut prob = 1.0;
        for (i, &(k, l, t, ref pmf)) in strata.iter().enumerate() {
            prob *= pmf[ones[i]];
            let st = &mut summary.arms[k].strata[l][t.index()];
            st.sum = ones[i] as f64;
            st.sum_sq = ones[i] as f64;
        }
        if prob > 0.0 {
            if let Some(c) = apply_rule(rule, &summary, &config.grid)?.chosen {
                welfare.add(prob * welfares[c]);
                regret.add(prob * (top - welfares[c]));
                defined.add(prob);
            }
        }
        // Odometer step over success counts.
        let mut i = 0;
        loop {
            if i == strata.len() {
                let d = defined.value();
                return Ok(ExactReport {
                    welfare: welfare.value() / d,
                    regret: regret.value() / d,
                    failure_probability: (1.0 - d).max(0.0),
                });
            }
            ones[i] += 1;
            if ones[i] < strata[i].3.len() {
                break;
            }
            ones[i] = 0;
            i += 1;
        }
    }
}

/// Two-arm family around equal welfares: ratios {0, 1}, `n` people per arm,
/// control mean `base` and treated mean `base + shift / √n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFamily {
    pub base: f64,
    pub shift: f64,
}

impl LocalFamily {
    pub fn config(&self, n: u64, replications: u64, seed: u64) -> Result<SimulationConfig> {
        let grid = RuleGrid::from_ratios(&RatioSet::new(vec![0.0, 1.0])?);
        let treated = self.base + self.shift / (n as f64).sqrt();
        let mut state = StateOfNature::new(1)?;
        state.insert(Treatment::Control, 0, 0.0, self.base)?;
        state.insert(Treatment::Treated, 0, 1.0, treated)?;
        let counts = StratumCounts::new(vec![vec![[n, 0]], vec![[0, n]]])?;
        SimulationConfig::new(grid, state, counts, OutcomeFamily::Bernoulli, replications, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledRegretPoint {
    pub n: u64,
    pub scaled_regret: f64,
    pub scaled_regret_se: f64,
    pub ties: u64,
    /// Tie-free replications where the comparison vector's winner equals the
    /// empirical success choice, over all tie-free replications.
    pub vmes_agreement: f64,
    /// Replications where the plug-in rule is defined and matches the
    /// empirical success choice, over those where it is defined.
    pub plugin_agreement: f64,
    pub plugin_defined: u64,
}

/// `√n · regret` of the empirical success rule along a local family.
pub fn scaled_regret_curve(
    family: &LocalFamily,
    ns: &[u64],
    replications: u64,
    seed: u64,
) -> Result<Vec<ScaledRegretPoint>> {
    ns.iter()
        .map(|&n| {
            let config = family.config(n, replications, seed)?;
            let welfares = grid_welfares(&config.grid, &config.state)?;
            let top = welfares.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let means = config.stratum_means()?;
            // (chosen, tie, vmes agrees, plug-in defined, plug-in agrees)
            let rows: Vec<(usize, bool, bool, bool, bool)> = (0..replications)
                .into_par_iter()
                .map(|rep| {
                    let summary = summary_with_means(&config, &means, rep)?;
                    let est = estimate_grid(&summary, &config.grid, CellWeights::Population)?;
                    let (chosen, tie) = argmax_with_tie(&est.arms);
                    let vmes = vmes_vectorize(&est.arms)
                        .ok()
                        .and_then(|bits| vmes_winner(&bits, est.arms.len()));
                    let plug = plugin_choose(&summary, &config.grid, &est);
                    Ok((
                        chosen,
                        tie,
                        vmes == Some(chosen),
                        plug.is_some(),
                        plug == Some(chosen),
                    ))
                })
                .collect::<Result<_>>()?;
            let root = (n as f64).sqrt();
            let (scaled_regret, scaled_regret_se) = mean_and_se(rows.iter().map(|r| root * (top - welfares[r.0])));
            let tie_free: Vec<_> = rows.iter().filter(|r| !r.1).collect();
            let defined: Vec<_> = rows.iter().filter(|r| r.3 && !r.1).collect();
            let share = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
            Ok(ScaledRegretPoint {
                n,
                scaled_regret,
                scaled_regret_se,
                ties: (rows.len() - tie_free.len()) as u64,
                vmes_agreement: share(tie_free.iter().filter(|r| r.2).count(), tie_free.len()),
                plugin_agreement: share(defined.iter().filter(|r| r.4).count(), defined.len()),
                plugin_defined: defined.len() as u64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_arm(m0: f64, m1: f64, n: u64, reps: u64) -> SimulationConfig {
        let grid = RuleGrid::from_ratios(&RatioSet::new(vec![0.0, 1.0]).unwrap());
        let mut state = StateOfNature::new(1).unwrap();
        state.insert(Treatment::Control, 0, 0.0, m0).unwrap();
        state.insert(Treatment::Treated, 0, 1.0, m1).unwrap();
        let counts = StratumCounts::new(vec![vec![[n, 0]], vec![[0, n]]]).unwrap();
        SimulationConfig::new(grid, state, counts, OutcomeFamily::Bernoulli, reps, 7).unwrap()
    }

    #[test]
    fn replications_are_reproducible() {
        let c = two_arm(0.3, 0.6, 20, 10);
        assert_eq!(simulate_sample(&c, 4).unwrap(), simulate_sample(&c, 4).unwrap());
        assert_ne!(simulate_sample(&c, 4).unwrap(), simulate_sample(&c, 5).unwrap());
        assert_eq!(simulate_sample(&c, 3).unwrap().summary(), simulate_summary(&c, 3).unwrap());
    }

    #[test]
    fn degenerate_means_are_reproduced() {
        let c = two_arm(0.0, 1.0, 5, 1);
        let s = simulate_sample(&c, 0).unwrap();
        assert!(s.arms()[0].strata[0][0].iter().all(|&y| y == 0.0));
        assert!(s.arms()[1].strata[0][1].iter().all(|&y| y == 1.0));
    }

    #[test]
    fn equal_means_have_zero_regret() {
        let r = rule_performance(&two_arm(0.4, 0.4, 6, 500), Rule::Mes).unwrap();
        assert_eq!(r.regret, 0.0);
    }

    #[test]
    fn fixed_best_rule_has_zero_regret() {
        let r = rule_performance(&two_arm(0.4, 0.6, 6, 200), Rule::Fixed(1)).unwrap();
        assert_eq!(r.regret, 0.0);
        assert_eq!(r.frequencies, vec![0.0, 1.0]);
    }

    #[test]
    fn frequencies_sum_to_one() {
        let r = rule_performance(&two_arm(0.45, 0.55, 6, 1000), Rule::Mes).unwrap();
        assert!((r.frequencies.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_inputs_have_exact_mean() {
        let xs = vec![0.858_512_345_678_9; 10_007];
        assert_eq!(mean_and_se(xs.iter().copied()), (xs[0], 0.0));
    }

    #[test]
    fn compensated_sum_keeps_small_terms() {
        let mut s = CompensatedSum::default();
        for x in [1e16, 1.0, -1e16] {
            s.add(x);
        }
        assert_eq!(s.value(), 1.0);
    }

    #[test]
    fn zero_shift_has_zero_scaled_regret() {
        let f = LocalFamily { base: 0.5, shift: 0.0 };
        for p in scaled_regret_curve(&f, &[16, 64], 200, 3).unwrap() {
            assert_eq!(p.scaled_regret, 0.0);
        }
    }
}
