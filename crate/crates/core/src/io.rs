//! File formats: sample and count CSVs, the reference allocation tables,
//! JSON run configuration and report rendering.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::design::{AllocationPolicy, CountTable};
use crate::error::{Error, Result};
use crate::estimators::CellWeights;
use crate::model::{ArmSample, ExperimentSample, PopulationProfile, RatioSet, RuleGrid, StateOfNature, StratumCounts, Treatment};
use crate::montecarlo::{OutcomeFamily, Rule};

fn at_line(line: u64, msg: impl std::fmt::Display) -> Error {
    Error::invalid(format!("line {line}: {msg}"))
}

fn csv_error(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => at_line(p.line(), e),
        None => Error::invalid(e.to_string()),
    }
}

fn parse_field<T: std::str::FromStr>(line: u64, name: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| at_line(line, format!("cannot parse {name} {raw:?}")))
}

/// A parsed sample file together with the cell labels it declares.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFile {
    pub cells: Vec<String>,
    pub arm_ids: Vec<String>,
    pub sample: ExperimentSample,
}

/// Reads per-individual records.
///
/// Columns are `arm_id`, then either a single `ratio` column or one
/// `ratio_<cell>` column per cell, then `cell` (optional with a single
/// `ratio`), `treatment` (0 or 1) and `outcome` (in [0, 1]). Arms are listed
/// in order of first appearance.
pub fn read_sample_csv(reader: impl Read) -> Result<SampleFile> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| at_line(1, format!("missing column {name:?}")));
    let arm_col = need("arm_id")?;
    let t_col = need("treatment")?;
    let y_col = need("outcome")?;
    let cell_col = col("cell");
    let (cells, ratio_cols): (Vec<String>, Vec<usize>) = match col("ratio") {
        Some(c) => (vec![PopulationProfile::single().cells()[0].clone()], vec![c]),
        None => header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix("ratio_").map(|l| (l.to_string(), i)))
            .unzip(),
    };
    if cells.is_empty() {
        return Err(at_line(1, "need a `ratio` column or `ratio_<cell>` columns"));
    }
    if cells.len() > 1 && cell_col.is_none() {
        return Err(at_line(1, "missing column \"cell\""));
    }
    let mut arm_ids: Vec<String> = Vec::new();
    let mut arms: Vec<ArmSample> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[arm_col].to_string();
        let rule: Vec<f64> = ratio_cols
            .iter()
            .zip(&cells)
            .map(|(&c, l)| parse_field(line, &format!("ratio for cell {l}"), &rec[c]))
            .collect::<Result<_>>()?;
        let cell = match cell_col {
            Some(c) if cells.len() > 1 => cells
                .iter()
                .position(|l| l == &rec[c])
                .ok_or_else(|| at_line(line, format!("unknown cell {:?}", &rec[c])))?,
            _ => 0,
        };
        let t: usize = parse_field(line, "treatment", &rec[t_col])?;
        let t = Treatment::from_index(t).map_err(|e| at_line(line, e))?;
        let y: f64 = parse_field(line, "outcome", &rec[y_col])?;
        let a = match arm_ids.iter().position(|x| x == &id) {
            Some(a) => {
                if arms[a].rule != rule {
                    return Err(at_line(line, format!("ratios change within arm {id:?}")));
                }
                a
            }
            None => {
                arm_ids.push(id);
                arms.push(ArmSample::new(rule));
                arms.len() - 1
            }
        };
        arms[a].push(cell, t, y).map_err(|e| at_line(line, e))?;
    }
    if arms.is_empty() {
        return Err(Error::invalid("sample file has no records"));
    }
    Ok(SampleFile {
        cells,
        arm_ids,
        sample: ExperimentSample::new(arms)?,
    })
}

/// Reads `arm,cell,treatment,count` rows into counts for `grid`. `arm` is
/// the rule's position in the grid and `cell` a label or position; missing
/// rows count as zero.
pub fn read_counts_csv(reader: impl Read, grid: &RuleGrid) -> Result<StratumCounts> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let expected = ["arm", "cell", "treatment", "count"];
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(at_line(1, format!("expected header {}", expected.join(","))));
    }
    let mut counts = StratumCounts::new(vec![vec![[0, 0]; grid.cells()]; grid.len()])?;
    let mut seen = std::collections::HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let arm: usize = parse_field(line, "arm", &rec[0])?;
        if arm >= grid.len() {
            return Err(at_line(line, format!("arm {arm} is outside the {}-rule grid", grid.len())));
        }
        let cell = match grid.profile().index_of(&rec[1]) {
            Some(c) => c,
            None => {
                let c: usize = parse_field(line, "cell", &rec[1])?;
                if c >= grid.cells() {
                    return Err(at_line(line, format!("cell {c} is out of range")));
                }
                c
            }
        };
        let t: usize = parse_field(line, "treatment", &rec[2])?;
        let t = Treatment::from_index(t).map_err(|e| at_line(line, e))?;
        let n: u64 = parse_field(line, "count", &rec[3])?;
        if !seen.insert((arm, cell, t)) {
            return Err(at_line(line, "duplicate stratum"));
        }
        counts.set(arm, cell, t, n);
    }
    Ok(counts)
}

pub fn write_counts_csv(counts: &StratumCounts, grid: &RuleGrid) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(["arm", "cell", "treatment", "count"]).map_err(io)?;
    for k in 0..counts.arms() {
        for (l, label) in grid.profile().cells().iter().enumerate() {
            for t in Treatment::BOTH {
                w.write_record([k.to_string(), label.clone(), t.index().to_string(), counts.get(k, l, t).to_string()])
                    .map_err(io)?;
            }
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?).map_err(|e| Error::invalid(e.to_string()))
}

/// One row of a reference allocation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub total: u64,
    pub arm_totals: [u64; 2],
    /// Stratum counts in table order: arm 1 low (control, treated), arm 2
    /// low, arm 1 high, arm 2 high.
    pub strata: [u64; 8],
    pub listed_upper: f64,
    pub listed_lower: f64,
}

impl ReferenceRow {
    /// Counts laid out `[arm][cell][treatment]`.
    pub fn counts(&self) -> StratumCounts {
        let n = self.strata;
        StratumCounts::new(vec![vec![[n[0], n[1]], [n[4], n[5]]], vec![[n[2], n[3]], [n[6], n[7]]]])
            .expect("fixed shape")
    }
}

/// Stratum allocations for the two-cell, two-rule example at one value of
/// `Pr(low)`, with the bounds listed beside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub name: String,
    pub p_low: f64,
    pub rows: Vec<ReferenceRow>,
}

/// Names of the built-in reference tables.
pub const REFERENCE_TABLES: [&str; 4] = ["p010", "p050", "p090", "p099"];

const P010: &str = include_str!("../fixtures/p010.csv");
const P050: &str = include_str!("../fixtures/p050.csv");
const P090: &str = include_str!("../fixtures/p090.csv");
const P099: &str = include_str!("../fixtures/p099.csv");

/// The two rules every reference table allocates over.
pub const REFERENCE_RULES: [[f64; 2]; 2] = [[0.5, 0.5], [0.7, 0.3]];

impl ReferenceTable {
    pub fn builtin(name: &str) -> Result<Self> {
        let (text, p) = match name {
            "p010" => (P010, 0.1),
            "p050" => (P050, 0.5),
            "p090" => (P090, 0.9),
            "p099" => (P099, 0.99),
            other => {
                return Err(Error::invalid(format!(
                    "unknown reference table {other:?}; expected one of {}",
                    REFERENCE_TABLES.join(", ")
                )))
            }
        };
        Self::parse(name, p, text.as_bytes())
    }

    pub fn parse(name: &str, p_low: f64, reader: impl Read) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            n: u64,
            n1: u64,
            n2: u64,
            n10_low: u64,
            n11_low: u64,
            n20_low: u64,
            n21_low: u64,
            n10_high: u64,
            n11_high: u64,
            n20_high: u64,
            n21_high: u64,
            upper: f64,
            lower: f64,
        }
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<Raw>() {
            let r = rec.map_err(csv_error)?;
            let strata = [
                r.n10_low, r.n11_low, r.n20_low, r.n21_low, r.n10_high, r.n11_high, r.n20_high, r.n21_high,
            ];
            let arm1 = strata[0] + strata[1] + strata[4] + strata[5];
            if arm1 != r.n1 || r.n1 + r.n2 != r.n || strata.iter().sum::<u64>() != r.n {
                return Err(Error::invalid(format!("{name}: row N={} does not add up", r.n)));
            }
            rows.push(ReferenceRow {
                total: r.n,
                arm_totals: [r.n1, r.n2],
                strata,
                listed_upper: r.upper,
                listed_lower: r.lower,
            });
        }
        Ok(ReferenceTable {
            name: name.to_string(),
            p_low,
            rows,
        })
    }

    pub fn grid(&self) -> Result<RuleGrid> {
        RuleGrid::new(
            REFERENCE_RULES.iter().map(|r| r.to_vec()).collect(),
            PopulationProfile::low_high(self.p_low)?,
        )
    }

    pub fn row(&self, total: u64) -> Option<&ReferenceRow> {
        self.rows.iter().find(|r| r.total == total)
    }

    pub fn count_table(&self) -> CountTable {
        CountTable {
            rows: self.rows.iter().map(|r| (r.total, r.counts())).collect::<BTreeMap<_, _>>(),
        }
    }

    /// The lower-bound column; constant within a table.
    pub fn listed_lower(&self) -> f64 {
        self.rows[0].listed_lower
    }
}

/// Allocation named in a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    /// Counts from the configured reference table or `count_table`.
    Explicit,
    /// Largest-remainder rounding of the given rule masses.
    Proportional { alphas: Vec<f64> },
}

/// JSON run configuration shared by every subcommand. Each command reads
/// only the fields it needs; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    /// Scalar candidate ratios. With a multi-cell profile and no `rules`,
    /// the grid is every combination of these ratios across cells.
    pub ratios: Option<RatioSet>,
    /// Explicit rule vectors, one fraction per cell.
    pub rules: Option<Vec<Vec<f64>>>,
    pub profile: Option<PopulationProfile>,
    /// Name of a built-in reference table (`p010`, `p050`, `p090`, `p099`);
    /// supplies grid, profile and explicit counts.
    pub reference: Option<String>,
    /// Total sample size.
    pub total: Option<u64>,
    /// Stratum counts `[rule][cell][treatment]`.
    pub counts: Option<Vec<Vec<[u64; 2]>>>,
    /// Counts per total size for the explicit policy.
    pub count_table: Option<BTreeMap<u64, Vec<Vec<[u64; 2]>>>>,
    pub policy: Option<PolicyConfig>,
    /// True welfare of each rule, for the welfare sandwich.
    pub welfares: Option<Vec<f64>>,
    pub state: Option<StateOfNature>,
    pub threshold: Option<f64>,
    pub max_total: Option<u64>,
    pub rule: Option<Rule>,
    pub weights: Option<CellWeights>,
    pub outcome: Option<OutcomeFamily>,
    pub seed: Option<u64>,
    pub replications: Option<u64>,
    /// Also compare simulated welfare with the bounds.
    pub verify: Option<bool>,
}

impl DesignConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("config line {}: {e}", e.line())))
    }

    pub fn reference_table(&self) -> Result<Option<ReferenceTable>> {
        self.reference.as_deref().map(ReferenceTable::builtin).transpose()
    }

    pub fn profile(&self) -> Result<PopulationProfile> {
        if let Some(t) = self.reference_table()? {
            return PopulationProfile::low_high(t.p_low);
        }
        Ok(self.profile.clone().unwrap_or_else(PopulationProfile::single))
    }

    /// Rule grid from `reference`, `rules`, or `ratios`, in that order.
    pub fn grid(&self) -> Result<RuleGrid> {
        if let Some(t) = self.reference_table()? {
            return t.grid();
        }
        let profile = self.profile()?;
        match (&self.rules, &self.ratios) {
            (Some(rules), _) => RuleGrid::new(rules.clone(), profile),
            (None, Some(ratios)) => Ok(RuleGrid::product(ratios, profile)),
            (None, None) => Err(Error::invalid("config needs `rules`, `ratios` or `reference`")),
        }
    }

    pub fn policy(&self) -> Result<AllocationPolicy> {
        match &self.policy {
            Some(PolicyConfig::Proportional { alphas }) => Ok(AllocationPolicy::Proportional { alphas: alphas.clone() }),
            Some(PolicyConfig::Explicit) | None => {
                if let Some(table) = &self.count_table {
                    let mut out = CountTable::default();
                    for (&n, c) in table {
                        out.insert(n, StratumCounts::new(c.clone())?)?;
                    }
                    Ok(AllocationPolicy::Explicit(out))
                } else if let Some(t) = self.reference_table()? {
                    Ok(AllocationPolicy::Explicit(t.count_table()))
                } else {
                    Err(Error::invalid("explicit policy needs `count_table` or `reference`"))
                }
            }
        }
    }

    /// Counts from `counts`, or from the policy at `total`.
    pub fn counts(&self, grid: &RuleGrid) -> Result<StratumCounts> {
        if let Some(c) = &self.counts {
            return StratumCounts::new(c.clone());
        }
        let total = self
            .total
            .ok_or_else(|| Error::invalid("config needs `counts` or `total`"))?;
        crate::design::allocate_counts(total, &self.policy()?, grid)
    }
}

/// Output encoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// Five significant digits, for human-facing tables.
pub fn sig5(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = (4 - x.abs().log10().floor() as i32).max(0) as usize;
    format!("{x:.digits$}")
}

/// A two-column `key,value` table.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct KeyValueTable {
    rows: Vec<(String, String)>,
}

impl KeyValueTable {
    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.rows.push((key.into(), value.into()));
    }

    pub fn num(&mut self, key: impl Into<String>, x: f64) {
        self.push(key, sig5(x));
    }

    pub fn render(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record(["key", "value"]).map_err(io)?;
        for (k, v) in &self.rows {
            w.write_record([k, v]).map_err(io)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
            .map_err(|e| Error::invalid(e.to_string()))
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_with_single_ratio() {
        let text = "arm_id,ratio,treatment,outcome\na,0,0,0.3\nb,1,1,0.5\n";
        let f = read_sample_csv(text.as_bytes()).unwrap();
        assert_eq!(f.arm_ids, vec!["a", "b"]);
        assert_eq!(f.sample.arms()[1].strata[0][1], vec![0.5]);
    }

    #[test]
    fn bad_outcome_names_its_line() {
        let text = "arm_id,ratio,treatment,outcome\na,0,0,0.3\na,0,0,1.2\n";
        let err = read_sample_csv(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn ratio_must_be_constant_within_arm() {
        let text = "arm_id,ratio,treatment,outcome\na,0.2,0,0.3\na,0.3,1,0.3\n";
        assert!(read_sample_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn covariate_sample() {
        let text = "arm_id,ratio_low,ratio_high,cell,treatment,outcome\n\
                    1,0.5,0.5,low,0,0.1\n1,0.5,0.5,high,1,0.9\n";
        let f = read_sample_csv(text.as_bytes()).unwrap();
        assert_eq!(f.cells, vec!["low", "high"]);
        assert_eq!(f.sample.arms()[0].strata[1][1], vec![0.9]);
    }

    #[test]
    fn reference_tables_load() {
        for name in REFERENCE_TABLES {
            let t = ReferenceTable::builtin(name).unwrap();
            assert!(t.rows.len() >= 10);
            t.grid().unwrap();
        }
        let t = ReferenceTable::builtin("p050").unwrap();
        assert_eq!(t.row(18).unwrap().strata, [2, 2, 2, 3, 2, 2, 3, 2]);
        let t = ReferenceTable::builtin("p010").unwrap();
        assert_eq!(t.row(21).unwrap().strata, [1, 1, 1, 1, 4, 4, 6, 3]);
    }

    #[test]
    fn counts_round_trip() {
        let t = ReferenceTable::builtin("p090").unwrap();
        let g = t.grid().unwrap();
        let c = t.row(68).unwrap().counts();
        let text = write_counts_csv(&c, &g).unwrap();
        assert_eq!(read_counts_csv(text.as_bytes(), &g).unwrap(), c);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(DesignConfig::from_json(r#"{"ratios":[0,1],"bogus":1}"#).is_err());
        let c = DesignConfig::from_json(r#"{"ratios":[0,1],"total":10}"#).unwrap();
        assert_eq!(c.grid().unwrap().len(), 2);
    }

    #[test]
    fn significant_digits() {
        assert_eq!(sig5(0.1446913), "0.14469");
        assert_eq!(sig5(0.0079126), "0.0079126");
        assert_eq!(sig5(18.0), "18.000");
    }
}
