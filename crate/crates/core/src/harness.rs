//! Monte Carlo experiments over ideal chains, simulated covariates, enrollment
//! designs and the pairwise baseline, with deterministic parallel replicates.
//!
//! Replicate `r` of cell `c` draws from ChaCha8 stream `(c << 40) | r` under the
//! master seed, and results are reduced in replicate order, so output does not
//! depend on the number of workers.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budget::{allocate, default_floor, BudgetPlan};
use crate::datagen::{gen_covariates, CovariateDistribution, IdealChain};
use crate::distributions::{chi2_cdf, chi2_quantile};
use crate::engine::{complete_plan, run_pairwise_qin, PreparedDataset, TrialOutcome};
use crate::error::{Error, Result};
use crate::linalg::{sample_covariance, CovarianceMode, CovariateDataset, CovariateMatrix};

pub const MIN_REPLICATES: usize = 100;

/// Independent generator for one replicate of one cell.
pub fn replicate_rng(master_seed: u64, cell: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream((cell << 40) | replicate);
    rng
}

/// Run `f(0..n)` on a pool of `workers` threads (0 = one per core), keeping index order.
pub fn run_replicates<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN, n };
        }
        let mean = compensated_sum(values.iter().copied()) / n as f64;
        let se = if n > 1 {
            let ss = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)));
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, se, n }
    }
}

/// `E(M) = p S F_{χ²_{p+2}}(a)` with `a = F⁻¹_{χ²_p}(1/S)`, the mean accepted
/// distance of complete rerandomization on an ideal dataset.
pub fn complete_rerandomization_mean(p: u32, total: u64) -> Result<f64> {
    if total <= 1 {
        return Ok(p as f64);
    }
    let a = chi2_quantile(1.0 / total as f64, p)?;
    Ok(p as f64 * total as f64 * chi2_cdf(a, p + 2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    IdealSweep,
    SimulatedCovariates,
    DatasetDesigns,
    MethodComparison,
}

/// A sequential enrollment design: unit counts per group, optionally with a fixed s-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub label: String,
    pub group_units: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<u64>>,
}

/// Everything that determines an experiment's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Covariate dimensions; the ideal sweep crosses all of them.
    #[serde(default)]
    pub p: Vec<u32>,
    /// Group counts for equal-group experiments.
    #[serde(default)]
    pub k: Vec<usize>,
    /// Total budgets, strictly increasing.
    #[serde(default)]
    pub s_grid: Vec<u64>,
    /// Units per group (`2n_k`) for simulated covariates.
    #[serde(default)]
    pub units_per_group: Vec<usize>,
    #[serde(default)]
    pub distributions: Vec<CovariateDistribution>,
    #[serde(default)]
    pub designs: Vec<Design>,
    #[serde(default)]
    pub q_values: Vec<f64>,
    /// Explicit s-vector replacing the allocation rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<u64>>,
    pub replicates: usize,
    /// Replicates for ideal-chain analogues of designs; defaults to `replicates`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ideal_replicates: Option<usize>,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<u64>,
    #[serde(default = "default_cap_multiplier")]
    pub cap_multiplier: u64,
    /// Worker threads (0 = one per core). Not part of the provenance hash.
    #[serde(default)]
    pub workers: usize,
    /// Average only trials where every group met its threshold.
    #[serde(default)]
    pub strict: bool,
}

fn default_cap_multiplier() -> u64 {
    crate::budget::DEFAULT_CAP_MULTIPLIER
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, replicates: usize, master_seed: u64) -> Self {
        Self {
            kind,
            p: Vec::new(),
            k: Vec::new(),
            s_grid: Vec::new(),
            units_per_group: Vec::new(),
            distributions: Vec::new(),
            designs: Vec::new(),
            q_values: Vec::new(),
            plan: None,
            replicates,
            ideal_replicates: None,
            master_seed,
            floor: None,
            cap_multiplier: default_cap_multiplier(),
            workers: 0,
            strict: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.replicates < MIN_REPLICATES {
            return fail("replicates must be at least 100");
        }
        if self.ideal_replicates.is_some_and(|r| r < MIN_REPLICATES) {
            return fail("ideal_replicates must be at least 100");
        }
        if self.s_grid.windows(2).any(|w| w[0] >= w[1]) {
            return fail("s_grid must be strictly increasing");
        }
        if self.s_grid.contains(&0) {
            return fail("budgets must be positive");
        }
        if self.cap_multiplier == 0 {
            return fail("cap_multiplier must be positive");
        }
        if self.p.contains(&0) || self.k.contains(&0) {
            return fail("p and K must be positive");
        }
        let needs = |ok: bool, m: &str| if ok { Ok(()) } else { fail(m) };
        match self.kind {
            ExperimentKind::IdealSweep => {
                needs(!self.p.is_empty() && !self.k.is_empty() && !self.s_grid.is_empty(), "ideal sweep needs p, k and s_grid")
            }
            ExperimentKind::SimulatedCovariates => needs(
                self.p.len() == 1
                    && self.k.len() == 1
                    && self.s_grid.len() == 1
                    && !self.units_per_group.is_empty()
                    && !self.distributions.is_empty(),
                "simulated covariates need one p, one k, one budget, units_per_group and distributions",
            ),
            ExperimentKind::DatasetDesigns => needs(
                self.s_grid.len() == 1 && !self.designs.is_empty(),
                "dataset designs need one budget and at least one design",
            ),
            ExperimentKind::MethodComparison => needs(
                !self.q_values.is_empty(),
                "method comparison needs q_values",
            ),
        }
    }

    /// SHA-256 of the canonical JSON with `workers` cleared.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.workers = 0;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn floor_for(&self, total: u64, groups: usize) -> u64 {
        self.floor.unwrap_or_else(|| default_floor(total, groups))
    }

    fn plan_for(&self, explicit: Option<&Vec<u64>>, total: u64, p: u32, sizes: &[f64]) -> Result<BudgetPlan> {
        let plan = match explicit {
            Some(s) => {
                let plan = BudgetPlan::explicit(s.clone(), self.cap_multiplier)?;
                if plan.groups() != sizes.len() {
                    return Err(Error::Config(format!(
                        "explicit plan has {} entries for {} groups",
                        plan.groups(),
                        sizes.len()
                    )));
                }
                plan
            }
            None => allocate(total, p, sizes, self.floor_for(total, sizes.len()))?,
        };
        Ok(plan.with_cap_multiplier(self.cap_multiplier))
    }
}

/// One cell of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub p: u32,
    pub k: usize,
    pub s: u64,
    /// s-vector joined with `;`.
    pub plan: String,
    pub e_m: f64,
    pub se_m: f64,
    pub e_mk: f64,
    pub se_mk: f64,
    pub ratio: f64,
    pub fallback_rate: f64,
    pub attempts_mean: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub master_seed: u64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub provenance: Provenance,
    pub rows: Vec<ReportRow>,
}

impl MonteCarloReport {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            provenance: Provenance {
                kind: config.kind,
                config_hash: config.hash(),
                master_seed: config.master_seed,
                replicates: config.replicates,
            },
            rows: Vec::new(),
        }
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

fn plan_string(plan: &BudgetPlan) -> String {
    plan.per_group
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// Per-replicate record of a covariate-based trial.
#[derive(Debug, Clone, Copy)]
struct TrialRecord {
    m: f64,
    fallback: bool,
    attempts: u64,
}

impl From<&TrialOutcome> for TrialRecord {
    fn from(o: &TrialOutcome) -> Self {
        Self {
            m: o.final_m,
            fallback: o.any_fallback(),
            attempts: o.total_attempts(),
        }
    }
}

struct TrialStats {
    summary: Summary,
    fallback_rate: f64,
    attempts_mean: f64,
}

fn trial_stats(records: &[TrialRecord], strict: bool) -> TrialStats {
    let n = records.len().max(1) as f64;
    let kept: Vec<f64> = records
        .iter()
        .filter(|r| !strict || !r.fallback)
        .map(|r| r.m)
        .collect();
    TrialStats {
        summary: Summary::of(&kept),
        fallback_rate: records.iter().filter(|r| r.fallback).count() as f64 / n,
        attempts_mean: compensated_sum(records.iter().map(|r| r.attempts as f64)) / n,
    }
}

/// Analytic `E(M)` against Monte Carlo `E(M_K)` from ideal chains, over `p × K × S`.
pub fn experiment_ideal_sweep(config: &ExperimentConfig) -> Result<MonteCarloReport> {
    expect_kind(config, ExperimentKind::IdealSweep)?;
    config.validate()?;
    let mut report = MonteCarloReport::new(config);
    let mut cell = 0u64;
    for &p in &config.p {
        for &k in &config.k {
            for &total in &config.s_grid {
                let sizes = vec![1.0; k];
                let plan = config.plan_for(config.plan.as_ref(), total, p, &sizes)?;
                let chain = IdealChain::new(p, &sizes, &plan)?;
                let values = run_replicates(config.workers, config.replicates, |r| {
                    let mut rng = replicate_rng(config.master_seed, cell, r as u64);
                    Ok(*chain.sample(&mut rng)?.m.last().expect("at least one group"))
                })?;
                let mk = Summary::of(&values);
                let e_m = complete_rerandomization_mean(p, total)?;
                report.rows.push(ReportRow {
                    label: format!("p={p},K={k},S={total}"),
                    p,
                    k,
                    s: total,
                    plan: plan_string(&plan),
                    e_m,
                    se_m: 0.0,
                    e_mk: mk.mean,
                    se_mk: mk.se,
                    ratio: e_m / mk.mean,
                    fallback_rate: 0.0,
                    attempts_mean: plan.total as f64,
                    replicates: config.replicates,
                });
                cell += 1;
            }
        }
    }
    Ok(report)
}

/// Sequential and complete rerandomization on freshly drawn i.i.d. covariates.
pub fn experiment_simulated(config: &ExperimentConfig) -> Result<MonteCarloReport> {
    expect_kind(config, ExperimentKind::SimulatedCovariates)?;
    config.validate()?;
    let (p, k, total) = (config.p[0], config.k[0], config.s_grid[0]);
    let mut report = MonteCarloReport::new(config);
    let mut cell = 0u64;
    for &units in &config.units_per_group {
        for &dist in &config.distributions {
            let sizes = vec![units as f64 / 2.0; k];
            let plan = config.plan_for(config.plan.as_ref(), total, p, &sizes)?;
            let complete = complete_plan(total)?.with_cap_multiplier(config.cap_multiplier);
            let pairs = run_replicates(config.workers, config.replicates, |r| {
                let mut rng = replicate_rng(config.master_seed, cell, r as u64);
                let x = gen_covariates(units * k, p as usize, dist, &mut rng)?;
                let seq = CovariateDataset::new(x, vec![units; k], 0.5, CovarianceMode::Homogeneous)?;
                let seq_out = PreparedDataset::new(&seq)?.run(&plan, &mut rng)?;
                let single = seq.regroup(vec![units * k])?;
                let all_out = PreparedDataset::new(&single)?.run(&complete, &mut rng)?;
                Ok((TrialRecord::from(&seq_out), TrialRecord::from(&all_out)))
            })?;
            let (seq, all): (Vec<TrialRecord>, Vec<TrialRecord>) = pairs.into_iter().unzip();
            let s_stats = trial_stats(&seq, config.strict);
            let c_stats = trial_stats(&all, config.strict);
            report.rows.push(ReportRow {
                label: format!("{},2n_k={units}", dist.name()),
                p,
                k,
                s: total,
                plan: plan_string(&plan),
                e_m: c_stats.summary.mean,
                se_m: c_stats.summary.se,
                e_mk: s_stats.summary.mean,
                se_mk: s_stats.summary.se,
                ratio: c_stats.summary.mean / s_stats.summary.mean,
                fallback_rate: s_stats.fallback_rate,
                attempts_mean: s_stats.attempts_mean,
                replicates: config.replicates,
            });
            cell += 1;
        }
    }
    Ok(report)
}

/// Each design on a fixed covariate matrix with the unit order reshuffled per
/// replicate, followed by its ideal-chain analogue (label suffix `/ideal`).
/// A single-group design is complete rerandomization.
pub fn experiment_designs(data: &CovariateMatrix, config: &ExperimentConfig) -> Result<MonteCarloReport> {
    expect_kind(config, ExperimentKind::DatasetDesigns)?;
    config.validate()?;
    let p = data.p() as u32;
    let total = config.s_grid[0];
    sample_covariance(data)?;
    let e_m = complete_rerandomization_mean(p, total)?;
    let mut report = MonteCarloReport::new(config);
    for (d, design) in config.designs.iter().enumerate() {
        let units: usize = design.group_units.iter().sum();
        if units != data.units() {
            return Err(Error::Config(format!(
                "design '{}' covers {units} units but the data has {}",
                design.label,
                data.units()
            )));
        }
        let sizes: Vec<f64> = design.group_units.iter().map(|&g| g as f64 / 2.0).collect();
        let plan = config.plan_for(design.plan.as_ref(), total, p, &sizes)?;
        let cell = 2 * d as u64;
        let records = run_replicates(config.workers, config.replicates, |r| {
            let mut rng = replicate_rng(config.master_seed, cell, r as u64);
            let mut order: Vec<usize> = (0..units).collect();
            order.shuffle(&mut rng);
            let ds = CovariateDataset::new(
                data.permute_units(&order)?,
                design.group_units.clone(),
                0.5,
                CovarianceMode::Homogeneous,
            )?;
            let out = PreparedDataset::new(&ds)?.run(&plan, &mut rng)?;
            Ok(TrialRecord::from(&out))
        })?;
        let stats = trial_stats(&records, config.strict);
        report.rows.push(ReportRow {
            label: design.label.clone(),
            p,
            k: sizes.len(),
            s: total,
            plan: plan_string(&plan),
            e_m,
            se_m: 0.0,
            e_mk: stats.summary.mean,
            se_mk: stats.summary.se,
            ratio: e_m / stats.summary.mean,
            fallback_rate: stats.fallback_rate,
            attempts_mean: stats.attempts_mean,
            replicates: config.replicates,
        });

        let ideal_reps = config.ideal_replicates.unwrap_or(config.replicates);
        let ideal = if sizes.len() == 1 {
            Summary { mean: e_m, se: 0.0, n: ideal_reps }
        } else {
            let chain = IdealChain::new(p, &sizes, &plan)?;
            let values = run_replicates(config.workers, ideal_reps, |r| {
                let mut rng = replicate_rng(config.master_seed, cell + 1, r as u64);
                Ok(*chain.sample(&mut rng)?.m.last().expect("at least one group"))
            })?;
            Summary::of(&values)
        };
        report.rows.push(ReportRow {
            label: format!("{}/ideal", design.label),
            p,
            k: sizes.len(),
            s: total,
            plan: plan_string(&plan),
            e_m,
            se_m: 0.0,
            e_mk: ideal.mean,
            se_mk: ideal.se,
            ratio: e_m / ideal.mean,
            fallback_rate: 0.0,
            attempts_mean: plan.total as f64,
            replicates: ideal_reps,
        });
    }
    Ok(report)
}

/// The pairwise biased-coin baseline for each `q`, on random pairings of a fixed
/// matrix with the full-data covariance taken as known. `E_M` is `p`, the mean
/// under plain complete randomization.
pub fn experiment_comparison(data: &CovariateMatrix, config: &ExperimentConfig) -> Result<MonteCarloReport> {
    expect_kind(config, ExperimentKind::MethodComparison)?;
    config.validate()?;
    let units = data.units();
    if units % 2 != 0 {
        return Err(Error::Config("pairwise comparison needs an even number of units".into()));
    }
    let p = data.p() as u32;
    let cov = sample_covariance(data)?;
    let mut report = MonteCarloReport::new(config);
    for (c, &q) in config.q_values.iter().enumerate() {
        let values = run_replicates(config.workers, config.replicates, |r| {
            let mut rng = replicate_rng(config.master_seed, c as u64, r as u64);
            let mut order: Vec<usize> = (0..units).collect();
            order.shuffle(&mut rng);
            let ds = CovariateDataset::new(
                data.permute_units(&order)?,
                vec![2; units / 2],
                0.5,
                CovarianceMode::Homogeneous,
            )?;
            Ok(run_pairwise_qin(&ds, q, &cov, &mut rng)?.final_m)
        })?;
        let s = Summary::of(&values);
        report.rows.push(ReportRow {
            label: format!("pairwise,q={q}"),
            p,
            k: units / 2,
            s: 1,
            plan: String::new(),
            e_m: p as f64,
            se_m: 0.0,
            e_mk: s.mean,
            se_mk: s.se,
            ratio: p as f64 / s.mean,
            fallback_rate: 0.0,
            attempts_mean: (units / 2) as f64,
            replicates: config.replicates,
        });
    }
    Ok(report)
}

fn expect_kind(config: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if config.kind != kind {
        return Err(Error::Config(format!(
            "expected a {kind:?} config, got {:?}",
            config.kind
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Companion plot-data path: `results.csv` → `results.plot.csv`.
pub fn plot_data_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.plot.csv"))
}

/// Write the report and its plot-data companion.
///
/// CSV columns, in order: `label,p,k,s,plan,e_m,se_m,e_mk,se_mk,ratio,fallback_rate,attempts_mean,replicates`.
/// The plot data has `series,x,e_m,e_mk,se_mk,ratio` with one series per `(p, K)`.
pub fn emit_report(report: &MonteCarloReport, format: ReportFormat, path: &Path) -> Result<()> {
    let bytes = match format {
        ReportFormat::Csv => report_csv(report)?,
        ReportFormat::Json => {
            let mut v = serde_json::to_vec_pretty(report)
                .map_err(|e| Error::Config(format!("cannot serialize report: {e}")))?;
            v.push(b'\n');
            v
        }
    };
    write_file(path, &bytes)?;
    write_file(&plot_data_path(path), &plot_csv(report)?)
}

pub fn report_csv(report: &MonteCarloReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &report.rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

#[derive(Serialize)]
struct PlotPoint<'a> {
    series: String,
    x: u64,
    e_m: f64,
    e_mk: f64,
    se_mk: f64,
    ratio: f64,
    label: &'a str,
}

fn plot_csv(report: &MonteCarloReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &report.rows {
        w.serialize(PlotPoint {
            series: format!("p={},K={}", row.p, row.k),
            x: row.s,
            e_m: row.e_m,
            e_mk: row.e_mk,
            se_mk: row.se_mk,
            ratio: row.ratio,
            label: &row.label,
        })
        .map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Config(format!("cannot write csv: {e}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<MonteCarloReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid report: {e}")))
}
