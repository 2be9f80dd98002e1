//! Ideal chains, synthetic covariates, CSV ingestion and a surrogate clinical dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal, Weibull};
use serde::{Deserialize, Serialize};

use crate::budget::{conditional_law, BudgetPlan};
use crate::distributions::{NoncentralChi2, TruncatedNoncentralChi2};
use crate::error::{Error, Result};
use crate::linalg::{sample_covariance, CovarianceMode, CovariateDataset, CovariateMatrix};

/// Marginal law for i.i.d. synthetic covariates, used as drawn (no standardization).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateDistribution {
    StdNormal,
    /// Rate 1.
    Exponential,
    /// Square of a standard normal.
    ChiSquared1,
    /// Shape 0.6, scale 1.
    Weibull,
    /// `exp(Z)` for standard normal `Z`.
    LogNormal,
}

impl CovariateDistribution {
    pub const ALL: [CovariateDistribution; 5] = [
        Self::StdNormal,
        Self::Exponential,
        Self::ChiSquared1,
        Self::Weibull,
        Self::LogNormal,
    ];

    /// Population excess kurtosis.
    pub fn excess_kurtosis(self) -> f64 {
        match self {
            Self::StdNormal => 0.0,
            Self::Exponential => 6.0,
            Self::ChiSquared1 => 12.0,
            Self::Weibull => 37.48,
            Self::LogNormal => 110.94,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::StdNormal => "std-normal",
            Self::Exponential => "exponential",
            Self::ChiSquared1 => "chi-squared1",
            Self::Weibull => "weibull",
            Self::LogNormal => "log-normal",
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Self::StdNormal => rng.sample(StandardNormal),
            Self::Exponential => rng.sample(Exp1),
            Self::ChiSquared1 => {
                let z: f64 = rng.sample(StandardNormal);
                z * z
            }
            Self::Weibull => Weibull::new(1.0, 0.6).expect("valid parameters").sample(rng),
            Self::LogNormal => rng.sample::<f64, _>(StandardNormal).exp(),
        }
    }
}

impl FromStr for CovariateDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown distribution '{s}' (expected one of std-normal, exponential, chi-squared1, weibull, log-normal)"
                ))
            })
    }
}

/// A `p × units` matrix of i.i.d. draws.
pub fn gen_covariates<R: Rng + ?Sized>(
    units: usize,
    p: usize,
    dist: CovariateDistribution,
    rng: &mut R,
) -> Result<CovariateMatrix> {
    if units < p + 2 {
        return Err(Error::domain(format!(
            "need at least p + 2 = {} units, got {units}",
            p + 2
        )));
    }
    Ok(CovariateMatrix::from_fn(p, units, |_, _| dist.sample(rng)))
}

/// One draw of `M_1..M_K` with the thresholds that were applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraw {
    pub m: Vec<f64>,
    pub thresholds: Vec<f64>,
}

/// Sampler for the distances of an idealized (infinitely large) dataset, where
/// each scaled `M_k` given `M_{k−1}` is a truncated non-central chi-squared.
#[derive(Debug, Clone)]
pub struct IdealChain {
    p: u32,
    sizes: Vec<f64>,
    budgets: Vec<u64>,
    first: Option<TruncatedNoncentralChi2>,
}

impl IdealChain {
    pub fn new(p: u32, group_sizes: &[f64], plan: &BudgetPlan) -> Result<Self> {
        if plan.groups() != group_sizes.len() {
            return Err(Error::Config(format!(
                "plan has {} groups but {} group sizes were given",
                plan.groups(),
                group_sizes.len()
            )));
        }
        let s1 = plan.per_group[0];
        let first = if s1 > 1 {
            let base = NoncentralChi2::central(p)?;
            let q = base.quantile(1.0 / s1 as f64)?;
            Some(TruncatedNoncentralChi2::with_mass(base, q, 1.0 / s1 as f64)?)
        } else {
            None
        };
        Ok(Self {
            p,
            sizes: group_sizes.to_vec(),
            budgets: plan.per_group.clone(),
            first,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ChainDraw> {
        let k_total = self.sizes.len();
        let mut m = Vec::with_capacity(k_total);
        let mut thresholds = Vec::with_capacity(k_total);
        let mut m_prev = 0.0;
        for k in 0..k_total {
            let (scale, lambda) = conditional_law(&self.sizes, k, m_prev);
            let s_k = self.budgets[k];
            let base = NoncentralChi2::new(self.p, lambda)?;
            let (draw, upper) = if s_k == 1 {
                (base.sample(rng), f64::INFINITY)
            } else {
                let trunc = match (k, &self.first) {
                    (0, Some(t)) => *t,
                    _ => {
                        let u = 1.0 / s_k as f64;
                        TruncatedNoncentralChi2::with_mass(base, base.quantile(u)?, u)?
                    }
                };
                (trunc.sample(rng)?, trunc.upper())
            };
            m_prev = scale * draw;
            m.push(m_prev);
            thresholds.push(scale * upper);
        }
        Ok(ChainDraw { m, thresholds })
    }
}

/// `M_1..M_K` for one ideal chain.
pub fn sample_ideal_chain<R: Rng + ?Sized>(
    p: u32,
    group_sizes: &[f64],
    plan: &BudgetPlan,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(IdealChain::new(p, group_sizes, plan)?.sample(rng)?.m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

/// How one CSV column becomes one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Level → 0/1 for categorical columns; without it the column must already be 0/1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<BTreeMap<String, u8>>,
    /// Cell text that marks a missing value, in addition to the empty string.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestionSchema {
    pub columns: Vec<ColumnSpec>,
}

impl IngestionSchema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("invalid schema document: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Schema("schema lists no columns".into()));
        }
        let mut seen = BTreeSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return Err(Error::Schema(format!("column '{}' listed twice", col.name)));
            }
            match (col.kind, &col.map) {
                (ColumnKind::Continuous, Some(_)) => {
                    return Err(Error::Schema(format!(
                        "continuous column '{}' cannot carry a level map",
                        col.name
                    )));
                }
                (ColumnKind::Categorical, Some(map)) => {
                    let values: BTreeSet<u8> = map.values().copied().collect();
                    if values != BTreeSet::from([0, 1]) {
                        return Err(Error::Schema(format!(
                            "map for '{}' must send levels onto both 0 and 1",
                            col.name
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }
}

/// Named covariates, one row per schema column.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub matrix: CovariateMatrix,
}

impl CovariateTable {
    pub fn into_dataset(
        self,
        group_units: Vec<usize>,
        omega: f64,
        mode: CovarianceMode,
    ) -> Result<CovariateDataset> {
        CovariateDataset::new(self.matrix, group_units, omega, mode)
    }
}

/// Read a covariate CSV, dichotomize categoricals and impute missing cells by
/// uniform draws from each column's observed values.
pub fn ingest_csv<R: Rng + ?Sized>(
    path: impl AsRef<Path>,
    schema: &IngestionSchema,
    rng: &mut R,
) -> Result<CovariateTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, schema, rng)
}

pub fn ingest_reader<Rd: Read, R: Rng + ?Sized>(
    reader: Rd,
    schema: &IngestionSchema,
    rng: &mut R,
) -> Result<CovariateTable> {
    schema.validate()?;
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .clone();
    let positions: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h.trim() == c.name)
                .ok_or_else(|| Error::Schema(format!("column '{}' not found in header", c.name)))
        })
        .collect::<Result<_>>()?;

    let p = schema.columns.len();
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); p];
    for (r, record) in csv.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        for (i, (spec, &pos)) in schema.columns.iter().zip(&positions).enumerate() {
            let cell = record.get(pos).unwrap_or("").trim();
            columns[i].push(parse_cell(cell, spec, row)?);
        }
    }
    let units = columns[0].len();

    let mut data = vec![0.0; units * p];
    for (i, (col, spec)) in columns.iter().zip(&schema.columns).enumerate() {
        let observed: Vec<f64> = col.iter().flatten().copied().collect();
        if observed.is_empty() {
            return Err(Error::AllMissingColumn(spec.name.clone()));
        }
        for (u, cell) in col.iter().enumerate() {
            data[u * p + i] = match cell {
                Some(v) => *v,
                None => observed[rng.random_range(0..observed.len())],
            };
        }
    }
    Ok(CovariateTable {
        names: schema.names(),
        matrix: CovariateMatrix::from_unit_major(p, units, data)?,
    })
}

fn parse_cell(cell: &str, spec: &ColumnSpec, row: usize) -> Result<Option<f64>> {
    if cell.is_empty() || spec.missing_token.as_deref() == Some(cell) {
        return Ok(None);
    }
    let fail = |message: String| Error::Parse {
        row,
        column: spec.name.clone(),
        message,
    };
    match (spec.kind, &spec.map) {
        (ColumnKind::Continuous, _) => match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => Err(fail(format!("'{cell}' is not a finite number"))),
        },
        (ColumnKind::Categorical, Some(map)) => map
            .get(cell)
            .map(|&v| Some(v as f64))
            .ok_or_else(|| fail(format!("level '{cell}' is not in the column map"))),
        (ColumnKind::Categorical, None) => match cell.parse::<f64>() {
            Ok(v) if v == 0.0 || v == 1.0 => Ok(Some(v)),
            _ => Err(fail(format!(
                "'{cell}' is not 0/1 and the column has no level map"
            ))),
        },
    }
}

/// Column names of [`surrogate_ucec_table`].
pub const SURROGATE_COLUMNS: [&str; 12] = [
    "age",
    "height",
    "weight",
    "pelvic_nodes_removed",
    "postmenopausal",
    "race_white",
    "other_malignancy",
    "serous_histology",
    "minimally_invasive_surgery",
    "peritoneal_wash_positive",
    "high_grade",
    "residual_tumor",
];

/// Treated-as-1 counts for the binary surrogate columns, out of 548 units.
const SURROGATE_BINARY_ONES: [usize; 8] = [402, 374, 41, 118, 236, 87, 337, 31];

pub const SURROGATE_UNITS: usize = 548;

/// Synthetic stand-in for a 548-subject clinical table: four continuous columns
/// (one bell-shaped, three skewed) and eight binary columns, two of them rare.
pub fn surrogate_ucec_table<R: Rng + ?Sized>(rng: &mut R) -> CovariateTable {
    let n = SURROGATE_UNITS;
    loop {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(12);
        // left-skewed age: 88 minus a gamma spread
        let age = Gamma::<f64>::new(3.0, 8.0).expect("valid parameters");
        rows.push((0..n).map(|_| (88.0 - age.sample(rng)).round()).collect());
        rows.push(
            (0..n)
                .map(|_| (162.0 + 7.0 * rng.sample::<f64, _>(StandardNormal)).round())
                .collect(),
        );
        rows.push(
            (0..n)
                .map(|_| (4.4 + 0.3 * rng.sample::<f64, _>(StandardNormal)).exp().round())
                .collect(),
        );
        let nodes = Gamma::<f64>::new(1.3, 12.0).expect("valid parameters");
        rows.push((0..n).map(|_| nodes.sample(rng).floor()).collect());
        for &ones in &SURROGATE_BINARY_ONES {
            let mut col: Vec<f64> = (0..n).map(|u| if u < ones { 1.0 } else { 0.0 }).collect();
            col.shuffle(rng);
            rows.push(col);
        }
        let matrix = CovariateMatrix::from_rows(&rows).expect("equal row lengths");
        if sample_covariance(&matrix).is_ok() {
            return CovariateTable {
                names: SURROGATE_COLUMNS.iter().map(|s| s.to_string()).collect(),
                matrix,
            };
        }
    }
}

/// [`surrogate_ucec_table`] as a single-group, equal-allocation dataset.
pub fn surrogate_ucec<R: Rng + ?Sized>(rng: &mut R) -> CovariateDataset {
    surrogate_ucec_table(rng)
        .into_dataset(vec![SURROGATE_UNITS], 0.5, CovarianceMode::Homogeneous)
        .expect("surrogate shape is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::ks_distance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(xs: &[f64]) -> (f64, f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        (mean, m2, m4 / (m2 * m2) - 3.0)
    }

    #[test]
    fn normal_columns_are_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gen_covariates(10_000, 2, CovariateDistribution::StdNormal, &mut rng).unwrap();
        for i in 0..2 {
            let (mean, var, _) = moments(&x.row(i));
            let se = (1.0f64 / 10_000.0).sqrt();
            assert!(mean.abs() < 5.0 * se);
            assert!((var - 1.0).abs() < 5.0 * (2.0f64 / 10_000.0).sqrt());
        }
        assert!(gen_covariates(4, 3, CovariateDistribution::StdNormal, &mut rng).is_err());
    }

    #[test]
    fn chi_squared_one_is_a_squared_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut xs: Vec<f64> = (0..50_000)
            .map(|_| CovariateDistribution::ChiSquared1.sample(&mut rng))
            .collect();
        let ks = ks_distance(&mut xs, |x| crate::distributions::chi2_cdf(x, 1));
        assert!(ks < 1.63 / (50_000f64).sqrt(), "ks = {ks}");
    }

    #[test]
    fn weibull_kurtosis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..1_000_000)
            .map(|_| CovariateDistribution::Weibull.sample(&mut rng))
            .collect();
        let (_, _, kurt) = moments(&xs);
        assert!((kurt / 37.5 - 1.0).abs() < 0.15, "kurtosis {kurt}");
    }

    #[test]
    fn kurtosis_constants_are_ordered() {
        let k: Vec<f64> = CovariateDistribution::ALL.iter().map(|d| d.excess_kurtosis()).collect();
        assert!(k.windows(2).all(|w| w[0] < w[1]));
        // Weibull: Γ(1+4/k) etc. at k = 0.6
        let g = |x: f64| crate::special::gamma(x);
        let (g1, g2, g3, g4) = (g(1.0 + 1.0 / 0.6), g(1.0 + 2.0 / 0.6), g(1.0 + 3.0 / 0.6), g(1.0 + 4.0 / 0.6));
        let var = g2 - g1 * g1;
        let weibull = (g4 - 4.0 * g3 * g1 + 6.0 * g2 * g1 * g1 - 3.0 * g1.powi(4)) / (var * var) - 3.0;
        assert!((weibull - 37.48).abs() < 0.01);
        let e = std::f64::consts::E;
        let lognormal = e.powi(4) + 2.0 * e.powi(3) + 3.0 * e.powi(2) - 6.0;
        assert!((lognormal - 110.94).abs() < 0.01);
    }

    #[test]
    fn distribution_names_round_trip() {
        for d in CovariateDistribution::ALL {
            assert_eq!(d.name().parse::<CovariateDistribution>().unwrap(), d);
            let json = serde_json::to_string(&d).unwrap();
            assert_eq!(json, format!("\"{}\"", d.name()));
        }
    }

    #[test]
    fn single_group_chain_mean() {
        let p = 4;
        let s = 50u64;
        let plan = BudgetPlan::explicit(vec![s], 10).unwrap();
        let chain = IdealChain::new(p, &[1.0], &plan).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 50_000;
        let draws: Vec<ChainDraw> = (0..n).map(|_| chain.sample(&mut rng).unwrap()).collect();
        assert!(draws.iter().all(|d| d.m[0] < d.thresholds[0]));
        let xs: Vec<f64> = draws.iter().map(|d| d.m[0]).collect();
        let (mean, var, _) = moments(&xs);
        let a = crate::distributions::chi2_quantile(1.0 / s as f64, p).unwrap();
        let exact = p as f64 * s as f64 * crate::distributions::chi2_cdf(a, p + 2);
        assert!((mean - exact).abs() < 5.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn chain_respects_thresholds() {
        let plan = BudgetPlan::explicit(vec![3, 7, 40], 10).unwrap();
        let chain = IdealChain::new(3, &[2.0, 1.0, 1.5], &plan).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let d = chain.sample(&mut rng).unwrap();
            assert!(d.m.iter().zip(&d.thresholds).all(|(m, a)| m < a));
        }
        assert!(IdealChain::new(3, &[1.0, 1.0], &plan).is_err());
    }

    const SCHEMA: &str = r#"{"columns": [
        {"name": "age", "kind": "continuous", "missing_token": "NA"},
        {"name": "grade", "kind": "categorical", "map": {"G1": 0, "G2": 0, "G3": 1}},
        {"name": "flag", "kind": "categorical"}
    ]}"#;

    #[test]
    fn ingestion_maps_and_imputes() {
        let csv = "id,age,grade,flag\n1,50,G1,0\n2,NA,G3,1\n3,61.5,,1\n4,70,G2,0\n";
        let schema = IngestionSchema::from_json(SCHEMA).unwrap();
        let t = ingest_reader(csv.as_bytes(), &schema, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(t.names, vec!["age", "grade", "flag"]);
        assert_eq!(t.matrix.p(), 3);
        assert_eq!(t.matrix.units(), 4);
        assert_eq!(t.matrix.row(2), vec![0.0, 1.0, 1.0, 0.0]);
        assert!([50.0, 61.5, 70.0].contains(&t.matrix.get(0, 1)));
        assert!([0.0, 1.0].contains(&t.matrix.get(1, 2)));
        let again = ingest_reader(csv.as_bytes(), &schema, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn ingestion_errors() {
        let schema = IngestionSchema::from_json(SCHEMA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bad_number = "age,grade,flag\n50,G1,0\nabc,G1,1\n";
        match ingest_reader(bad_number.as_bytes(), &schema, &mut rng) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "age");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_level = "age,grade,flag\n50,G4,0\n";
        assert!(matches!(ingest_reader(bad_level.as_bytes(), &schema, &mut rng), Err(Error::Parse { .. })));
        let missing_col = "age,grade\n50,G1\n";
        assert!(matches!(ingest_reader(missing_col.as_bytes(), &schema, &mut rng), Err(Error::Schema(_))));
        let all_missing = "age,grade,flag\nNA,G1,0\n,G2,1\n";
        assert!(matches!(
            ingest_reader(all_missing.as_bytes(), &schema, &mut rng),
            Err(Error::AllMissingColumn(c)) if c == "age"
        ));
        let not_onto = r#"{"columns": [{"name": "g", "kind": "categorical", "map": {"a": 1, "b": 1}}]}"#;
        assert!(matches!(IngestionSchema::from_json(not_onto), Err(Error::Schema(_))));
    }

    #[test]
    fn surrogate_shape() {
        let t = surrogate_ucec_table(&mut ChaCha8Rng::seed_from_u64(10));
        assert_eq!(t.matrix.p(), 12);
        assert_eq!(t.matrix.units(), 548);
        let rare = (4..12)
            .filter(|&i| {
                let f = t.matrix.row(i).iter().sum::<f64>() / 548.0;
                f.min(1.0 - f) < 0.1
            })
            .count();
        assert_eq!(rare, 2);
        assert!(sample_covariance(&t.matrix).is_ok());
        let again = surrogate_ucec_table(&mut ChaCha8Rng::seed_from_u64(10));
        assert_eq!(t, again);
    }
}
