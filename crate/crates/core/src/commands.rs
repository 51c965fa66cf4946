//! Subcommand implementations. Each returns the fully rendered report, so
//! the caller writes nothing when a command fails.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::BoundReport;
use crate::design::{optimize_saturation, sufficient_sample_size, SaturationDesign, SampleSizeStep};
use crate::error::Error;
use crate::estimators::{cmes_choose, mes_choose};
use crate::io::{read_counts_csv, read_sample_csv, sig5, to_json, DesignConfig, Format, KeyValueTable, ReferenceTable};
use crate::model::{grid_welfares, RatioSet, RuleGrid, StratumCounts, Treatment};
use crate::montecarlo::{rule_performance, verify_bounds, BoundCheck, OutcomeFamily, Rule, SimulationConfig, SimulationReport};

pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_EMPTY_STRATUM: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;
pub const EXIT_NO_SIZE: i32 = 5;

/// Replications used by `simulate` when neither flag nor config sets them.
pub const DEFAULT_REPLICATIONS: u64 = 10_000;
/// Largest total size `samplesize` scans by default.
pub const DEFAULT_MAX_TOTAL: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CommandError {}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::EmptyStratum { .. } => EXIT_EMPTY_STRATUM,
            Error::Infeasible(_) => EXIT_INFEASIBLE,
            _ => EXIT_VALIDATION,
        };
        CommandError {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult<T> = std::result::Result<T, CommandError>;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub input: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub format: Format,
    pub seed: Option<u64>,
    pub reps: Option<u64>,
}

fn read_text(path: &Path) -> CmdResult<String> {
    fs::read_to_string(path).map_err(|e| CommandError {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    })
}

fn load_config(opts: &Options) -> CmdResult<DesignConfig> {
    match &opts.config {
        Some(p) => DesignConfig::from_json(&read_text(p)?).map_err(|e| CommandError {
            code: EXIT_VALIDATION,
            message: format!("{}: {e}", p.display()),
        }),
        None => Ok(DesignConfig::default()),
    }
}

fn with_path(path: &Path, e: Error) -> CommandError {
    let mut c = CommandError::from(e);
    c.message = format!("{}: {}", path.display(), c.message);
    c
}

fn render<T: Serialize>(format: Format, report: &T, table: impl FnOnce() -> KeyValueTable) -> CmdResult<String> {
    Ok(match format {
        Format::Json => to_json(report)?,
        Format::Csv => table().render()?,
    })
}

fn rule_label(rule: &[f64]) -> String {
    let parts: Vec<String> = rule.iter().map(|r| r.to_string()).collect();
    format!("({})", parts.join(" "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChooseReport {
    /// `mes` for single-cell samples, `cmes` otherwise.
    pub rule: String,
    pub rules: Vec<Vec<f64>>,
    pub chosen: usize,
    pub chosen_rule: Vec<f64>,
    pub tie: bool,
    pub estimates: Vec<f64>,
    pub cell_estimates: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Picks the rule with the largest estimated welfare from a sample file.
pub fn cmd_choose(opts: &Options) -> CmdResult<String> {
    let config = load_config(opts)?;
    let path = opts.input.as_deref().ok_or_else(|| CommandError {
        code: EXIT_VALIDATION,
        message: "choose needs --input <sample.csv>".into(),
    })?;
    let file = read_sample_csv(read_text(path)?.as_bytes()).map_err(|e| with_path(path, e))?;
    let summary = file.sample.summary();
    let configured = config.rules.is_some() || config.ratios.is_some() || config.reference.is_some();
    let (label, outcome, grid) = if file.cells.len() == 1 {
        let ratios = match &config.ratios {
            Some(r) => r.clone(),
            None => {
                let mut r: Vec<f64> = summary.arms.iter().map(|a| a.rule[0]).collect();
                r.sort_by(f64::total_cmp);
                RatioSet::new(r)?
            }
        };
        let d = mes_choose(&summary, &ratios)?;
        ("mes", d, RuleGrid::from_ratios(&ratios))
    } else {
        let grid = if configured {
            config.grid()?
        } else {
            let profile = config.profile.clone().ok_or_else(|| CommandError {
                code: EXIT_VALIDATION,
                message: "multi-cell samples need a `profile` in --config".into(),
            })?;
            RuleGrid::new(summary.arms.iter().map(|a| a.rule.clone()).collect(), profile)?
        };
        if grid.profile().cells() != file.cells.as_slice() {
            return Err(Error::invalid(format!(
                "sample cells {:?} do not match profile cells {:?}",
                file.cells,
                grid.profile().cells()
            ))
            .into());
        }
        let d = cmes_choose(&summary, &grid, config.weights.unwrap_or_default())?;
        ("cmes", d, grid)
    };
    let report = ChooseReport {
        rule: label.into(),
        rules: grid.rules().to_vec(),
        chosen: outcome.chosen,
        chosen_rule: outcome.rule.clone(),
        tie: outcome.tie,
        estimates: outcome.estimates.arms.clone(),
        cell_estimates: outcome.estimates.cells.clone(),
        weights: outcome.estimates.weights.clone(),
    };
    render(opts.format, &report, || {
        let mut t = KeyValueTable::default();
        t.push("rule", label);
        t.push("chosen", report.chosen.to_string());
        t.push("chosen_rule", rule_label(&report.chosen_rule));
        t.push("tie", report.tie.to_string());
        for (r, u) in report.rules.iter().zip(&report.estimates) {
            t.num(format!("estimate{}", rule_label(r)), *u);
        }
        t
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsOutput {
    pub rules: Vec<Vec<f64>>,
    pub total: u64,
    pub counts: StratumCounts,
    pub bounds: BoundReport,
}

fn counts_from_input(path: &Path, grid: &RuleGrid) -> CmdResult<StratumCounts> {
    let text = read_text(path)?;
    let first = text.lines().find(|l| !l.starts_with('#')).unwrap_or("");
    if first.split(',').map(str::trim).eq(["arm", "cell", "treatment", "count"]) {
        return read_counts_csv(text.as_bytes(), grid).map_err(|e| with_path(path, e));
    }
    let file = read_sample_csv(text.as_bytes()).map_err(|e| with_path(path, e))?;
    let summary = file.sample.summary();
    let sample_counts = summary.counts();
    let mut counts = StratumCounts::new(vec![vec![[0, 0]; grid.cells()]; grid.len()])?;
    for (k, rule) in grid.rules().iter().enumerate() {
        let a = summary.arm_for(rule).ok_or_else(|| Error::MissingCell { rule: rule.clone() })?;
        for l in 0..grid.cells() {
            for t in Treatment::BOTH {
                counts.set(k, l, t, sample_counts.get(a, l, t));
            }
        }
    }
    Ok(counts)
}

/// Finite-sample bounds for a design given by counts.
pub fn cmd_bounds(opts: &Options) -> CmdResult<String> {
    let config = load_config(opts)?;
    let grid = config.grid()?;
    let counts = match &opts.input {
        Some(p) => counts_from_input(p, &grid)?,
        None => config.counts(&grid)?,
    };
    let welfares = match (&config.welfares, &config.state) {
        (Some(w), _) => Some(w.clone()),
        (None, Some(s)) => Some(grid_welfares(&grid, s)?),
        (None, None) => None,
    };
    if let Some(w) = &welfares {
        if w.len() != grid.len() {
            return Err(Error::invalid(format!("{} welfares for {} rules", w.len(), grid.len())).into());
        }
    }
    let bounds = BoundReport::compute(&grid, &counts, welfares.as_deref())?;
    let out = BoundsOutput {
        rules: grid.rules().to_vec(),
        total: counts.total(),
        counts,
        bounds,
    };
    render(opts.format, &out, || {
        let b = &out.bounds;
        let mut t = KeyValueTable::default();
        t.push("total", out.total.to_string());
        t.num("uniform_regret_upper", b.uniform_regret_upper);
        t.push("reference", b.reference.to_string());
        for (key, v) in [
            ("welfare_lower", b.welfare_lower),
            ("welfare_upper", b.welfare_upper),
            ("penalty", b.penalty),
            ("penalty_upper", b.penalty_upper),
        ] {
            if let Some(v) = v {
                t.num(key, v);
            }
        }
        if let Some(best) = b.best {
            t.push("best", best.to_string());
        }
        t
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOutput {
    pub design: SaturationDesign,
    /// `1 / (α_k N)` per ratio.
    pub precisions: Vec<f64>,
}

/// Quasi-optimal distribution of clusters over the candidate ratios.
pub fn cmd_design(opts: &Options) -> CmdResult<String> {
    let config = load_config(opts)?;
    let ratios = config.ratios.clone().ok_or_else(|| CommandError {
        code: EXIT_VALIDATION,
        message: "design needs `ratios` in --config".into(),
    })?;
    let total = config.total.ok_or_else(|| CommandError {
        code: EXIT_VALIDATION,
        message: "design needs `total` in --config".into(),
    })?;
    let design = optimize_saturation(&ratios, total)?;
    let precisions = design.precisions()?.rows().iter().map(|r| r[0]).collect();
    let out = DesignOutput { design, precisions };
    render(opts.format, &out, || {
        let mut t = KeyValueTable::default();
        t.push("total", out.design.total.to_string());
        t.num("objective", out.design.objective);
        for (r, a) in out.design.ratios.ratios().iter().zip(&out.design.alphas) {
            t.num(format!("alpha({r})"), *a);
        }
        t
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListedComparison {
    pub total: u64,
    pub computed: f64,
    pub listed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeReport {
    pub reference: Option<String>,
    pub threshold: f64,
    pub total: u64,
    pub trace: Vec<SampleSizeStep>,
    /// Every row of the reference table, when one is configured.
    pub listed: Vec<ListedComparison>,
    pub notes: Vec<String>,
}

/// Tolerance at which a computed bound is said to match a listed one.
pub const LISTED_TOL: f64 = 5e-4;

fn compare_listed(table: &ReferenceTable, threshold: f64) -> crate::error::Result<(Vec<ListedComparison>, Vec<String>)> {
    let grid = table.grid()?;
    let mut listed = Vec::new();
    let mut notes = Vec::new();
    for row in &table.rows {
        let a = crate::bounds::NoisePrecision::from_counts(&grid, &row.counts())?;
        let computed = crate::bounds::uniform_regret_cmes(&a, grid.profile())?.value;
        if (computed - row.listed_upper).abs() > LISTED_TOL {
            notes.push(format!(
                "N={}: computed bound {} differs from listed {}",
                row.total,
                sig5(computed),
                row.listed_upper
            ));
        }
        listed.push(ListedComparison {
            total: row.total,
            computed,
            listed: row.listed_upper,
        });
    }
    if let Some(first) = listed.iter().find(|c| c.listed < threshold) {
        notes.push(format!("listed bounds first fall below the threshold at N={}", first.total));
    }
    Ok((listed, notes))
}

/// Smallest total size whose uniform regret bound is below the threshold.
pub fn cmd_samplesize(opts: &Options) -> CmdResult<String> {
    let config = load_config(opts)?;
    let grid = config.grid()?;
    let policy = config.policy()?;
    let table = config.reference_table()?;
    let threshold = match (config.threshold, &table) {
        (Some(t), _) => t,
        (None, Some(t)) => t.listed_lower(),
        (None, None) => {
            return Err(CommandError {
                code: EXIT_VALIDATION,
                message: "samplesize needs `threshold` in --config".into(),
            })
        }
    };
    let result = sufficient_sample_size(threshold, &policy, &grid, config.max_total.unwrap_or(DEFAULT_MAX_TOTAL))?;
    let Some(total) = result.total else {
        return Err(CommandError {
            code: EXIT_NO_SIZE,
            message: format!(
                "no sample size up to {} brings the bound below {threshold}",
                config.max_total.unwrap_or(DEFAULT_MAX_TOTAL)
            ),
        });
    };
    let (listed, notes) = match &table {
        Some(t) => compare_listed(t, threshold)?,
        None => (Vec::new(), Vec::new()),
    };
    let report = SampleSizeReport {
        reference: config.reference.clone(),
        threshold,
        total,
        trace: result.trace,
        listed,
        notes,
    };
    render(opts.format, &report, || {
        let mut t = KeyValueTable::default();
        t.num("threshold", report.threshold);
        t.push("total", report.total.to_string());
        for s in &report.trace {
            t.num(format!("bound(N={})", s.total), s.bound);
        }
        for n in &report.notes {
            t.push("note", n.clone());
        }
        t
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateOutput {
    pub report: SimulationReport,
    pub check: Option<BoundCheck>,
}

/// Monte Carlo performance of a rule in a configured state.
pub fn cmd_simulate(opts: &Options) -> CmdResult<String> {
    let config = load_config(opts)?;
    let grid = config.grid()?;
    let state = config.state.clone().ok_or_else(|| CommandError {
        code: EXIT_VALIDATION,
        message: "simulate needs `state` in --config".into(),
    })?;
    let counts = config.counts(&grid)?;
    let replications = opts.reps.or(config.replications).unwrap_or(DEFAULT_REPLICATIONS);
    let seed = opts.seed.or(config.seed).unwrap_or(0);
    let rule = config.rule.unwrap_or(if grid.cells() == 1 {
        Rule::Mes
    } else {
        Rule::Cmes(config.weights.unwrap_or_default())
    });
    let sim = SimulationConfig::new(
        grid,
        state,
        counts,
        config.outcome.unwrap_or(OutcomeFamily::Bernoulli),
        replications,
        seed,
    )?;
    let report = rule_performance(&sim, rule)?;
    let check = if config.verify.unwrap_or(false) {
        Some(verify_bounds(&sim)?)
    } else {
        None
    };
    let out = SimulateOutput { report, check };
    render(opts.format, &out, || {
        let r = &out.report;
        let mut t = KeyValueTable::default();
        t.push("replications", r.replications.to_string());
        t.push("seed", r.seed.to_string());
        t.num("welfare", r.welfare);
        t.num("welfare_se", r.welfare_se);
        t.num("regret", r.regret);
        t.num("regret_se", r.regret_se);
        t.push("failures", r.failures.to_string());
        t.push("ties", r.ties.to_string());
        for (k, f) in r.frequencies.iter().enumerate() {
            t.num(format!("frequency[{k}]"), *f);
        }
        if let Some(c) = &out.check {
            t.num("bound_lower", c.lower);
            t.num("bound_upper", c.upper);
            t.push("bounds_hold", c.passed().to_string());
        }
        t
    })
}

